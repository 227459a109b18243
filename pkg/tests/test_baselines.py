import math

import numpy as np
import pytest

from itempromo.baselines import eligible_users, iu_filter, rand_filter, ru_filter
from itempromo.data import InteractionMatrix, apply_perturbation, compute_degrees
from itempromo.model import EmbeddingTable, ModelConfig, TrainedModel
from itempromo.synthetic import random_matrix

from conftest import random_model


def _scored_model(scores):
    users = np.asarray([[s] for s in scores], dtype=np.float32)
    cfg = ModelConfig(num_layers=0, embed_dim=1, epochs=0)
    return TrainedModel(cfg, EmbeddingTable(users, np.ones((1, 1), np.float32)), len(scores), 1)


def test_rand_exhausts_pool():
    R = InteractionMatrix.from_pairs([], [], 3, 1)
    assert rand_filter(R, 0, 3, 0).added_users == (0, 1, 2)


def test_rand_deterministic_per_seed():
    R = random_matrix(50, 10, 0.1, np.random.default_rng(0))
    a = rand_filter(R, 4, 6, 11)
    assert a == rand_filter(R, 4, 6, 11)
    assert a.seed == 11 and a.attack_name == "randfilter"


def test_rand_returns_all_when_pool_small():
    R = InteractionMatrix.from_pairs([0, 1], [0, 0], 3, 1)
    assert rand_filter(R, 0, 5, 0).added_users == (2,)


def test_rand_uniform_frequency():
    R = InteractionMatrix.from_pairs([], [], 10, 1)
    gen = np.random.default_rng(1)
    n = 10_000
    counts = np.zeros(10)
    for _ in range(n):
        counts[rand_filter(R, 0, 1, gen).added_users[0]] += 1
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n / 10) < 3 * sigma)


def test_iu_sorts_by_degree():
    R = InteractionMatrix.from_pairs([0] * 5 + [1] + [2] * 3, [1, 2, 3, 4, 5, 1, 1, 2, 3], 3, 6)
    assert iu_filter(R, 0, 2).added_users == (0, 2)


def test_iu_skips_existing_raters():
    R = InteractionMatrix.from_pairs([0] * 5 + [1] + [2] * 3, [0, 2, 3, 4, 5, 1, 1, 2, 3], 3, 6)
    assert iu_filter(R, 0, 1).added_users == (2,)


@pytest.mark.parametrize("seed", range(3))
def test_iu_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    R = random_matrix(60, 20, 0.1, rng)
    deg = compute_degrees(R).user_degrees
    t = int(rng.integers(20))
    pool = [u for u in range(60) if not R.contains(u, t)]
    expect = sorted(sorted(pool, key=lambda u: (-deg[u], u))[:7])
    assert list(iu_filter(R, t, 7).added_users) == expect


def test_ru_argmax():
    R = InteractionMatrix.from_pairs([], [], 3, 1)
    assert ru_filter(_scored_model([0.2, 0.9, 0.4]), R, 0, 1).added_users == (1,)


def test_ru_full_budget_takes_everyone():
    R = InteractionMatrix.from_pairs([1], [0], 4, 1)
    p = ru_filter(_scored_model([0.2, 0.9, 0.4, -1.0]), R, 0, 4)
    assert p.added_users == (0, 2, 3)


@pytest.mark.parametrize("seed", range(3))
def test_ru_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    R = random_matrix(40, 15, 0.15, rng)
    model = random_model(R, dim=3, layers=2, seed=seed)
    t = int(rng.integers(15))
    emb = model.embed(R)
    s = emb.users @ emb.items[t]
    pool = [u for u in range(40) if not R.contains(u, t)]
    expect = sorted(sorted(pool, key=lambda u: (-s[u], u))[:5])
    assert list(ru_filter(model, R, t, 5).added_users) == expect


@pytest.mark.parametrize("seed", range(5))
def test_outputs_are_valid_perturbations(seed):
    rng = np.random.default_rng(seed)
    R = random_matrix(30, 12, 0.2, rng)
    model = random_model(R, seed=seed)
    t = int(rng.integers(12))
    for p in (rand_filter(R, t, 4, seed), iu_filter(R, t, 4), ru_filter(model, R, t, 4)):
        assert len(p.added_users) == 4
        assert set(p.added_users) <= set(eligible_users(R, t).tolist())
        diff = apply_perturbation(R, p).to_dense().astype(int) - R.to_dense().astype(int)
        assert diff.sum() == 4 and diff.min() == 0 and diff[:, t].sum() == 4
