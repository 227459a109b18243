"""Pairwise-ranking (BPR) training of the propagation model."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .data import InteractionMatrix, NormalizedMatrix, normalize
from .model import EmbeddingTable, ModelConfig, TrainedModel, combine, init_embeddings, propagate

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainTriple(NamedTuple):
    user: int
    pos: int
    neg: int


def _pair_keys(R: InteractionMatrix) -> np.ndarray:
    users, items = R.pairs()
    return users * R.num_items + items  # sorted: csr is row-major with sorted columns


def _is_member(keys: np.ndarray, users: np.ndarray, items: np.ndarray, num_items: int) -> np.ndarray:
    q = users * num_items + items
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, keys.size - 1)
    return keys[pos] == q if keys.size else np.zeros(q.shape, dtype=bool)


def sample_triples(R: InteractionMatrix, count: int, rng: np.random.Generator,
                   keys: np.ndarray | None = None) -> np.ndarray:
    """Draw ``count`` (user, positive, negative) rows as an int64 array.

    Users are uniform over those with at least one positive and one negative;
    negatives are drawn by rejection.
    """
    deg = np.diff(R.csr.indptr)
    eligible = np.flatnonzero((deg > 0) & (deg < R.num_items))
    if eligible.size == 0:
        raise TrainingError("no user has both a positive and a negative item")
    if keys is None:
        keys = _pair_keys(R)
    users = eligible[rng.integers(0, eligible.size, size=count)]
    offs = (rng.random(count) * deg[users]).astype(np.int64)
    pos = np.asarray(R.csr.indices)[R.csr.indptr[users] + offs].astype(np.int64)
    neg = rng.integers(0, R.num_items, size=count)
    bad = _is_member(keys, users, neg, R.num_items)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, R.num_items, size=idx.size)
        bad[idx] = _is_member(keys, users[idx], neg[idx], R.num_items)
    return np.stack([users, pos, neg], axis=1)


def bpr_loss_and_grad(E0: EmbeddingTable, norm: NormalizedMatrix, alphas, triples: np.ndarray,
                      l2: float) -> tuple[float, EmbeddingTable]:
    """Mean BPR loss over ``triples`` and its gradient w.r.t. the layer-0 tables.

    Scores go through the full propagation; the backward pass reuses
    ``propagate`` because the bipartite operator is symmetric.
    """
    num_layers = len(alphas) - 1
    Z = combine(propagate(norm, E0, num_layers), alphas)
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    zu, zi, zj = Z.users[u], Z.items[i], Z.items[j]
    x = np.einsum("bd,bd->b", zu, zi - zj)
    B = x.size
    wu, wi, wj = E0.users[u], E0.items[i], E0.items[j]
    reg = 0.5 * l2 * (np.einsum("bd,bd->b", wu, wu) + np.einsum("bd,bd->b", wi, wi)
                      + np.einsum("bd,bd->b", wj, wj))
    loss = float(np.mean(np.logaddexp(0.0, -x) + reg))

    coef = -np.exp(-np.logaddexp(0.0, x)) / B  # d loss / d x = -sigmoid(-x) / B
    gZu = np.zeros_like(Z.users)
    gZi = np.zeros_like(Z.items)
    np.add.at(gZu, u, coef[:, None] * (zi - zj))
    np.add.at(gZi, i, coef[:, None] * zu)
    np.add.at(gZi, j, -coef[:, None] * zu)
    grad = combine(propagate(norm, EmbeddingTable(gZu, gZi), num_layers), alphas)

    gu, gi = grad.users, grad.items
    np.add.at(gu, u, (l2 / B) * wu)
    np.add.at(gi, i, (l2 / B) * wi)
    np.add.at(gi, j, (l2 / B) * wj)
    return loss, EmbeddingTable(gu, gi)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: EmbeddingTable | None = None
    v: EmbeddingTable | None = None

    def step(self, params: EmbeddingTable, grad: EmbeddingTable) -> EmbeddingTable:
        if self.m is None:
            self.m = EmbeddingTable(np.zeros_like(params.users), np.zeros_like(params.items))
            self.v = EmbeddingTable(np.zeros_like(params.users), np.zeros_like(params.items))
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, g, m, v in ((params.users, grad.users, self.m.users, self.v.users),
                           (params.items, grad.items, self.m.items, self.v.items)):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return EmbeddingTable(*out)


def bpr_step(params: EmbeddingTable, norm: NormalizedMatrix, alphas, triples: np.ndarray,
             opt: Adam, l2: float) -> tuple[EmbeddingTable, float]:
    loss, grad = bpr_loss_and_grad(params, norm, alphas, triples, l2)
    return opt.step(params, grad), loss


def train(R: InteractionMatrix, config: ModelConfig, *, log_csv=None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainedModel:
    """Train embeddings on ``R``; deterministic for a given ``config.seed``.

    ``log_csv`` may be a path or text stream receiving ``epoch,loss,elapsed_ms``.
    """
    init = init_embeddings(config, R.num_users, R.num_items)
    params = init.astype(np.float64)
    norm = normalize(R)
    alphas = config.alphas
    rng = np.random.default_rng([config.seed, 1])
    keys = _pair_keys(R)
    steps = max(1, math.ceil(R.nnz / config.batch_size))
    opt = Adam(config.learning_rate)

    if log_csv is None or hasattr(log_csv, "write"):
        fh = log_csv
    else:
        fh = open(log_csv, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh) if fh is not None else None
    try:
        if writer is not None:
            writer.writerow(["epoch", "loss", "elapsed_ms"])
        start = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            total = 0.0
            for step in range(steps):
                batch = sample_triples(R, config.batch_size, rng, keys)
                params, loss = bpr_step(params, norm, alphas, batch, opt, config.l2_reg)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
                total += loss
            mean = total / steps
            elapsed = int((time.perf_counter() - start) * 1000)
            if writer is not None:
                writer.writerow([epoch, f"{mean:.6f}", elapsed])
            if on_epoch is not None:
                on_epoch(epoch, mean)
            log.debug("epoch %d loss %.5f", epoch, mean)
    finally:
        if fh is not None and fh is not log_csv:
            fh.close()

    if config.epochs == 0:
        final = init
    else:
        final = params.astype(np.float32)
    if not final.is_finite():
        raise TrainingError("trained embeddings contain non-finite values")
    return TrainedModel(config, final, R.num_users, R.num_items)
