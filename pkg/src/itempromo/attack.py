"""Masked targeted topological attack.

The objective rewards a high score for the target item among a masked set of
users while penalizing the scores of the items currently in their top-K
lists. Its gradient with respect to the (relaxed) interaction matrix is
computed by a hand-written reverse pass that differentiates through the
degree normalization; ranking lists and the user mask are held fixed.

Two gradient routes exist: ``grad_full`` materializes the dense M x N
gradient (reference, small graphs only) and ``grad_target_column`` computes
only the target column with memory linear in the number of users.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import (InteractionMatrix, NormalizedMatrix, Perturbation, compute_degrees,
                   normalize, validate_perturbation)
from .model import EmbeddingTable, TrainedModel, combine, propagate, recommend_topk

# items per block in the column sweep; transient buffers are block x d
ITEM_BLOCK = 256


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 0.5
    gamma: float = 0.95
    K: int = 50
    budget: int = 10
    fallback_pool_size: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.K < 1 or self.budget < 1:
            raise ValueError("K and budget must be positive")

    @property
    def pool_size(self) -> int:
        if self.fallback_pool_size is not None:
            return self.fallback_pool_size
        return max(self.budget, 100)


@dataclass(frozen=True)
class SaliencyColumn:
    target_item: int
    gradient: np.ndarray
    candidates: np.ndarray


@dataclass(frozen=True)
class MaskedUserSet:
    users: np.ndarray
    gamma: float
    fallback: bool = False


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# graph bookkeeping shared by both gradient routes


class AttackGraph:
    """Normalized operator plus the degree data needed to differentiate it."""

    def __init__(self, R: InteractionMatrix):
        self.R = R
        deg = compute_degrees(R)
        self.norm: NormalizedMatrix = normalize(R, deg)
        self.user_deg = deg.user_degrees.astype(np.float64)
        self.item_deg = deg.item_degrees.astype(np.float64)
        self.user_c = np.maximum(self.user_deg, 1.0)
        self.item_c = np.maximum(self.item_deg, 1.0)

    @property
    def A(self) -> sp.csr_matrix:
        return self.norm.weights

    @property
    def At(self) -> sp.csr_matrix:
        return self.norm.weights_t

    @cached_property
    def item_blocks(self) -> list[tuple[int, int, sp.csr_matrix, sp.csc_matrix]]:
        out = []
        n = self.R.num_items
        for lo in range(0, n, ITEM_BLOCK):
            hi = min(lo + ITEM_BLOCK, n)
            blk = self.At[lo:hi]
            out.append((lo, hi, blk, blk.T))
        return out

    def target_column(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(users, weights) of the stored entries in column ``t``."""
        lo, hi = self.At.indptr[t], self.At.indptr[t + 1]
        return self.At.indices[lo:hi], self.At.data[lo:hi]


def _as_graph(R) -> AttackGraph:
    return R if isinstance(R, AttackGraph) else AttackGraph(R)


def _forward(model: TrainedModel, graph: AttackGraph, layers=None):
    if layers is None:
        layers = propagate(graph.norm, model.embeddings.astype(np.float64), model.config.num_layers)
    return layers, combine(layers, model.config.alphas)


# ---------------------------------------------------------------------------
# masking and objective


def mask_users(model: TrainedModel, R: InteractionMatrix, t: int, gamma: float,
               fallback_pool_size: int = 100, *, emb: EmbeddingTable | None = None) -> MaskedUserSet:
    """Users whose sigmoid score for ``t`` reaches ``gamma``.

    When nobody qualifies the ``fallback_pool_size`` highest-scoring users
    (ties by index) are returned instead.
    """
    if emb is None:
        emb = model.embed(R)
    s = emb.users @ emb.items[t]
    users = np.flatnonzero(sigmoid(s) >= gamma)
    if users.size:
        return MaskedUserSet(users, gamma)
    k = min(fallback_pool_size, s.size)
    order = np.lexsort((np.arange(s.size), -s))[:k]
    return MaskedUserSet(np.sort(order), gamma, fallback=True)


def _user_array(users) -> np.ndarray:
    if isinstance(users, MaskedUserSet):
        users = users.users
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError("the masked user set is empty")
    return users


def recommendation_lists(emb: EmbeddingTable, R: InteractionMatrix, users, K: int) -> np.ndarray:
    return recommend_topk(emb, R, K, users=users).items


def _objective_terms(emb: EmbeddingTable, users: np.ndarray, omega: np.ndarray, t: int, lam: float):
    """Objective value and its derivative w.r.t. each participating score."""
    n = users.size
    zu = emb.users[users]
    s_t = zu @ emb.items[t]
    valid = (omega >= 0) & (omega != t)
    safe = np.where(valid, omega, 0)
    s_j = np.empty(omega.shape)
    for k in range(omega.shape[1]):
        s_j[:, k] = np.einsum("ud,ud->u", zu, emb.items[safe[:, k]])
    pen = np.where(valid, log_sigmoid(s_j), 0.0).sum(axis=1)
    value = float(np.sum(lam * log_sigmoid(s_t) - (1.0 - lam) * pen) / n)
    # d log sigmoid(x) / dx = sigmoid(-x)
    coef_t = lam * sigmoid(-s_t) / n
    coef_j = np.where(valid, -(1.0 - lam) * sigmoid(-s_j) / n, 0.0)
    return value, coef_t, coef_j, safe


def attack_objective(model: TrainedModel, R: InteractionMatrix, t: int, users, lam: float,
                     K: int, *, emb: EmbeddingTable | None = None,
                     omega: np.ndarray | None = None) -> float:
    """Masked promotion objective averaged over ``users``.

    ``omega`` (top-K lists for ``users``) is recomputed from ``R`` when absent.
    """
    users = _user_array(users)
    if emb is None:
        emb = model.embed(R)
    if omega is None:
        omega = recommendation_lists(emb, R, users, K)
    return _objective_terms(emb, users, omega, t, lam)[0]


# ---------------------------------------------------------------------------
# gradients


def _seed_dense(emb, users, coef_t, coef_j, safe, t, shape):
    """Sparse M x N matrix of d objective / d score."""
    m, n = shape
    k = safe.shape[1]
    rows = np.concatenate([users, np.repeat(users, k)])
    cols = np.concatenate([np.full(users.size, t), safe.ravel()])
    vals = np.concatenate([coef_t, coef_j.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))


def grad_full(model: TrainedModel, R: InteractionMatrix, t: int, users, lam: float, K: int,
              *, omega: np.ndarray | None = None) -> np.ndarray:
    """Dense M x N gradient of the objective w.r.t. every interaction entry.

    Reference route for small graphs. Entries already equal to 1 and
    entries outside column ``t`` are included.
    """
    graph = _as_graph(R)
    users = _user_array(users)
    layers, emb = _forward(model, graph)
    if omega is None:
        omega = recommendation_lists(emb, graph.R, users, K)
    _, coef_t, coef_j, safe = _objective_terms(emb, users, omega, t, lam)
    G = _seed_dense(emb, users, coef_t, coef_j, safe, t, graph.R.shape)
    dZu = np.asarray(G @ emb.items)
    dZi = np.asarray(G.T @ emb.users)

    A = graph.A
    alphas = model.config.alphas
    L = model.config.num_layers
    P = np.zeros(graph.R.shape)
    gu, gi = alphas[L] * dZu, alphas[L] * dZi
    for l in range(L, 0, -1):
        P += gu @ layers[l - 1].items.T + layers[l - 1].users @ gi.T
        gu, gi = alphas[l - 1] * dZu + A @ gi, alphas[l - 1] * dZi + A.T @ gu

    # chain rule through D_u^-1/2 R D_i^-1/2 with clamped degrees
    PA = np.asarray(A.multiply(P).toarray())
    row = (graph.user_deg >= 1) / (2.0 * graph.user_c) * PA.sum(axis=1)
    col = (graph.item_deg >= 1) / (2.0 * graph.item_c) * PA.sum(axis=0)
    scale = np.outer(graph.user_c ** -0.5, graph.item_c ** -0.5)
    return P * scale - row[:, None] - col[None, :]


def grad_target_column(model: TrainedModel, R, t: int, users, lam: float, K: int, *,
                       layers: list[EmbeddingTable] | None = None,
                       emb: EmbeddingTable | None = None,
                       omega: np.ndarray | None = None) -> SaliencyColumn:
    """Gradient of the objective w.r.t. column ``t`` of the interaction matrix.

    Only user-sized adjoints are materialized: the reverse recursion over the
    bipartite operator splits into two chains of alternating user/item
    positions, and every item-side step is folded into a blocked
    ``A (a*dZi + A^T g)`` product. ``R`` may be an :class:`AttackGraph` and
    ``layers``/``emb`` a precomputed forward pass to share work across calls.
    """
    graph = _as_graph(R)
    users = _user_array(users)
    if emb is None or layers is None:
        layers, emb = _forward(model, graph, layers)
    if omega is None:
        omega = recommendation_lists(emb, graph.R, users, K)
    _, coef_t, coef_j, safe = _objective_terms(emb, users, omega, t, lam)

    m = graph.R.num_users
    d = emb.dim
    L = model.config.num_layers
    alphas = model.config.alphas
    A, At = graph.A, graph.At

    # seed adjoints: d objective / d final embeddings, kept compact
    zu_masked = emb.users[users]
    dzu = coef_t[:, None] * emb.items[t]
    for k in range(safe.shape[1]):
        dzu += coef_j[:, k, None] * emb.items[safe[:, k]]
    npos = users.size
    kk = safe.shape[1]
    seed_t = sp.csr_matrix(
        (np.concatenate([coef_t, coef_j.ravel()]),
         (np.concatenate([np.full(npos, t), safe.ravel()]),
          np.concatenate([np.arange(npos), np.repeat(np.arange(npos), kk)]))),
        shape=(graph.R.num_items, npos))
    dzi_t = np.asarray(seed_t[t] @ zu_masked).ravel()
    col_users, col_w = graph.target_column(t)

    def at_row_t(g):
        return col_w @ g[col_users]

    def a_times_item_adjoint(l, g_prev):
        """A @ (alpha_l * dZi + A^T g_prev), blocked over items."""
        out = np.zeros((m, d))
        for lo, hi, blk, blk_t in graph.item_blocks:
            tmp = alphas[l] * np.asarray(seed_t[lo:hi] @ zu_masked)
            if g_prev is not None:
                tmp += blk @ g_prev
            out += blk_t @ tmp
        return out

    colP = np.zeros(m)
    rowacc = np.zeros(m)
    colacc = 0.0
    it = [layers[l].items[t] for l in range(L + 1)]

    for start_on_user in (True, False):
        gu = None
        if start_on_user:
            gu = np.zeros((m, d))
            gu[users] = alphas[L] * dzu
        on_user = start_on_user
        l = L
        while l >= 1:
            if on_user:
                colP += gu @ it[l - 1]
                rowacc += np.einsum("ud,ud->u", gu, layers[l].users)
                colacc += float(it[l - 1] @ at_row_t(gu))
                on_user = False
                l -= 1
                continue
            git = alphas[l] * dzi_t + (at_row_t(gu) if gu is not None else 0.0)
            colP += layers[l - 1].users @ git
            colacc += float(git @ it[l])
            agi = a_times_item_adjoint(l, gu)
            rowacc += np.einsum("ud,ud->u", layers[l - 1].users, agi)
            gu = None
            if l - 1 >= 1:
                agi[users] += alphas[l - 1] * dzu
                gu = agi
            del agi
            on_user = True
            l -= 1

    ct = graph.item_c[t]
    grad = (colP * graph.user_c ** -0.5 * ct ** -0.5
            - (graph.user_deg >= 1) / (2.0 * graph.user_c) * rowacc
            - float(graph.item_deg[t] >= 1) / (2.0 * ct) * colacc)
    candidates = np.ones(m, dtype=bool)
    candidates[col_users] = False
    return SaliencyColumn(int(t), grad, candidates)


# ---------------------------------------------------------------------------
# edge selection and the attack pipeline


def select_topk_edges(sal: SaliencyColumn, budget: int) -> np.ndarray:
    """Up to ``budget`` candidate users with the largest positive gradients."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    g = sal.gradient
    pool = np.flatnonzero(sal.candidates & (g > 0))
    order = np.lexsort((pool, -g[pool]))
    return pool[order[:budget]]


def build_mask_and_perturb(R: InteractionMatrix, t: int, selected, budget: int,
                           attack_name: str = "proposed") -> Perturbation:
    """Turn the selected users into a perturbation of column ``t``.

    The sign-ascent step followed by projection to {0,1} sets exactly the
    selected (previously zero, positive-gradient) entries to one.
    """
    added = tuple(sorted(int(u) for u in selected))
    p = Perturbation(int(t), added, int(budget), attack_name)
    validate_perturbation(R, p)
    return p


def run_attack(model: TrainedModel, R: InteractionMatrix, t: int,
               config: AttackConfig = AttackConfig(), *,
               return_saliency: bool = False):
    """Single-step masked attack on target item ``t``."""
    if not 0 <= t < R.num_items:
        raise IndexError(f"target item {t} out of range [0, {R.num_items})")
    graph = AttackGraph(R)
    layers, emb = _forward(model, graph)
    masked = mask_users(model, R, t, config.gamma, config.pool_size, emb=emb)
    omega = recommendation_lists(emb, R, masked.users, config.K)
    sal = grad_target_column(model, graph, t, masked, config.lam, config.K,
                             layers=layers, emb=emb, omega=omega)
    chosen = select_topk_edges(sal, config.budget)
    p = build_mask_and_perturb(R, t, chosen, config.budget, "proposed")
    if return_saliency:
        return p, sal
    return p


def column_dominance(full_grad: np.ndarray, t: int) -> float:
    """Fraction of users whose target-column gradient beats every other column."""
    others = np.delete(full_grad, t, axis=1)
    if others.shape[1] == 0:
        return 1.0
    return float(np.mean(full_grad[:, t] > others.max(axis=1)))


def write_saliency_csv(sal: SaliencyColumn, selected, path) -> None:
    chosen = set(int(u) for u in selected)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_index", "gradient", "selected"])
        for u, g in enumerate(sal.gradient):
            w.writerow([u, repr(float(g)), int(u in chosen)])
