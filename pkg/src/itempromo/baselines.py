"""Heuristic item-promotion baselines.

All three choose users who have not yet interacted with the target item, so
their perturbations are interchangeable with the gradient attack's.
"""

from __future__ import annotations

import numpy as np

from .data import InteractionMatrix, Perturbation, compute_degrees
from .model import TrainedModel


def eligible_users(R: InteractionMatrix, t: int) -> np.ndarray:
    return np.flatnonzero(~R.column(t))


def _top_by(values: np.ndarray, pool: np.ndarray, budget: int) -> tuple[int, ...]:
    order = np.lexsort((pool, -values[pool]))
    return tuple(sorted(pool[order[:budget]].tolist()))


def rand_filter(R: InteractionMatrix, t: int, budget: int, rng) -> Perturbation:
    """Uniformly random eligible users. ``rng`` may be a Generator or an int seed."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if seed is not None else rng
    pool = eligible_users(R, t)
    k = min(budget, pool.size)
    chosen = gen.choice(pool, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    return Perturbation(t, tuple(sorted(chosen.tolist())), budget, "randfilter",
                        None if seed is None else int(seed))


def iu_filter(R: InteractionMatrix, t: int, budget: int) -> Perturbation:
    """Most active eligible users (highest degree, ties by index)."""
    deg = compute_degrees(R).user_degrees
    return Perturbation(t, _top_by(deg, eligible_users(R, t), budget), budget, "iufilter")


def ru_filter(model: TrainedModel, R: InteractionMatrix, t: int, budget: int) -> Perturbation:
    """Eligible users with the highest predicted score for ``t``."""
    emb = model.embed(R)
    s = emb.users @ emb.items[t]
    return Perturbation(t, _top_by(s, eligible_users(R, t), budget), budget, "rufilter")
