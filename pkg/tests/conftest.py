import numpy as np
import pytest

from itempromo.model import ModelConfig, TrainedModel, init_embeddings
from itempromo.synthetic import random_matrix


def random_model(R, dim=4, layers=2, seed=0, scale=1.0):
    """Untrained model with Gaussian tables; enough for oracle comparisons."""
    cfg = ModelConfig(num_layers=layers, embed_dim=dim, seed=seed, epochs=0)
    emb = init_embeddings(cfg, R.num_users, R.num_items)
    if scale != 1.0:
        emb = emb.scaled(scale).astype(np.float32)
    return TrainedModel(cfg, emb, R.num_users, R.num_items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph(rng):
    return random_matrix(12, 15, 0.25, rng, min_degree=1)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
