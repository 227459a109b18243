"""Synthetic implicit-feedback datasets for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .data import InteractionMatrix


def two_community_dataset(num_users: int = 1500, num_items: int = 2000, *, seed: int = 0,
                          mean_degree: float = 24.0, zipf_exponent: float = 1.0,
                          in_community: float = 0.9, test_fraction: float = 0.2,
                          ) -> tuple[InteractionMatrix, InteractionMatrix]:
    """Two user/item communities with Zipf item popularity and lognormal activity.

    Each user draws mostly from its own community's items, proportionally to
    popularity. Returns ``(train, test)`` on a shared shape; every user with at
    least two interactions keeps ``test_fraction`` of them for testing.
    """
    rng = np.random.default_rng(seed)
    user_comm = np.arange(num_users) % 2
    item_comm = rng.permutation(np.arange(num_items) % 2)
    pop = np.empty(num_items)
    for c in (0, 1):
        members = np.flatnonzero(item_comm == c)
        ranks = rng.permutation(members.size) + 1
        pop[members] = ranks.astype(np.float64) ** -zipf_exponent
    probs = {}
    for c in (0, 1):
        w = np.where(item_comm == c, in_community, 1.0 - in_community) * pop
        probs[c] = w / w.sum()

    sigma = 0.6
    degs = rng.lognormal(np.log(mean_degree) - sigma ** 2 / 2, sigma, size=num_users)
    degs = np.clip(np.round(degs), 3, num_items // 4).astype(np.int64)

    train_u, train_i, test_u, test_i = [], [], [], []
    for u in range(num_users):
        items = rng.choice(num_items, size=degs[u], replace=False, p=probs[user_comm[u]])
        n_test = int(round(test_fraction * items.size)) if items.size >= 2 else 0
        test_u.extend([u] * n_test)
        test_i.extend(items[:n_test].tolist())
        train_u.extend([u] * (items.size - n_test))
        train_i.extend(items[n_test:].tolist())
    train = InteractionMatrix.from_pairs(train_u, train_i, num_users, num_items)
    test = InteractionMatrix.from_pairs(test_u, test_i, num_users, num_items)
    return train, test


def random_matrix(num_users: int, num_items: int, density: float, rng: np.random.Generator,
                  min_degree: int = 0) -> InteractionMatrix:
    """Bernoulli matrix, optionally topped up so every row and column has ``min_degree`` entries."""
    dense = rng.random((num_users, num_items)) < density
    if min_degree:
        for _ in range(4):
            for u in np.flatnonzero(dense.sum(1) < min_degree):
                free = np.flatnonzero(~dense[u])
                dense[u, rng.choice(free, min_degree - dense[u].sum(), replace=False)] = True
            for i in np.flatnonzero(dense.sum(0) < min_degree):
                free = np.flatnonzero(~dense[:, i])
                dense[rng.choice(free, min_degree - dense[:, i].sum(), replace=False), i] = True
    return InteractionMatrix.from_dense(dense)
