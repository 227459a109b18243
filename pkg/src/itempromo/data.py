"""Interaction matrices, degree statistics, normalization and perturbations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class DatasetFormatError(ValueError):
    """Raised when an interaction file cannot be parsed."""


class PerturbationError(ValueError):
    """Raised when a perturbation is inconsistent with its source matrix."""


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Binary M x N user-item matrix stored as a canonical CSR pattern.

    Only membership matters; every stored entry has value 1.
    """

    num_users: int
    num_items: int
    csr: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("matrix dimensions must be positive")
        if self.csr.shape != (self.num_users, self.num_items):
            raise ValueError(f"csr shape {self.csr.shape} != {(self.num_users, self.num_items)}")

    @classmethod
    def from_pairs(cls, users, items, num_users: int | None = None,
                   num_items: int | None = None) -> "InteractionMatrix":
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        if users.shape != items.shape:
            raise ValueError("users and items must have equal length")
        if num_users is None:
            num_users = int(users.max()) + 1 if users.size else 1
        if num_items is None:
            num_items = int(items.max()) + 1 if items.size else 1
        if users.size:
            if users.min() < 0 or users.max() >= num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= num_items:
                raise ValueError("item index out of range")
        # dedup via linear keys, then build a sorted CSR
        keys = np.unique(users * num_items + items)
        rows, cols = np.divmod(keys, num_items)
        indptr = np.zeros(num_users + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        csr = sp.csr_matrix((np.ones(keys.size, dtype=np.float64), cols, indptr),
                            shape=(num_users, num_items))
        for arr in (csr.data, csr.indices, csr.indptr):
            arr.flags.writeable = False
        return cls(int(num_users), int(num_items), csr)

    @classmethod
    def from_dense(cls, dense) -> "InteractionMatrix":
        dense = np.asarray(dense)
        rows, cols = np.nonzero(dense)
        return cls.from_pairs(rows, cols, dense.shape[0], dense.shape[1])

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_users, self.num_items)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (users, items) arrays sorted by user then item."""
        rows = np.repeat(np.arange(self.num_users), np.diff(self.csr.indptr))
        return rows, np.asarray(self.csr.indices, dtype=np.int64)

    def entries(self) -> set[tuple[int, int]]:
        return set(zip(*(a.tolist() for a in self.pairs())))

    def positives(self, user: int) -> np.ndarray:
        lo, hi = self.csr.indptr[user], self.csr.indptr[user + 1]
        return np.asarray(self.csr.indices[lo:hi])

    @cached_property
    def csc(self) -> sp.csc_matrix:
        return self.csr.tocsc()

    def item_users(self, item: int) -> np.ndarray:
        """Users that interacted with ``item`` (ascending)."""
        lo, hi = self.csc.indptr[item], self.csc.indptr[item + 1]
        return np.sort(self.csc.indices[lo:hi]).astype(np.int64)

    def column(self, item: int) -> np.ndarray:
        """Dense boolean length-M indicator of column ``item``."""
        out = np.zeros(self.num_users, dtype=bool)
        out[self.item_users(item)] = True
        return out

    def contains(self, user: int, item: int) -> bool:
        pos = self.positives(user)
        k = np.searchsorted(pos, item)
        return bool(k < pos.size and pos[k] == item)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.csr.indptr, other.csr.indptr)
                and np.array_equal(self.csr.indices, other.csr.indices))

    __hash__ = None


@dataclass(frozen=True)
class DegreeProfile:
    user_degrees: np.ndarray
    item_degrees: np.ndarray
    mean_item_degree: float


@dataclass(frozen=True)
class NormalizedMatrix:
    """Symmetrically normalized interaction matrix ``D_u^-1/2 R D_i^-1/2``.

    ``weights`` keeps the exact sparsity pattern of the source matrix; the
    transpose is cached because every propagation layer needs both sides.
    """

    weights: sp.csr_matrix
    weights_t: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass(frozen=True)
class Perturbation:
    target_item: int
    added_users: tuple[int, ...]
    budget: int
    attack_name: str
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "added_users", tuple(int(u) for u in self.added_users))
        if len(set(self.added_users)) != len(self.added_users):
            raise PerturbationError("added users must be distinct")
        if len(self.added_users) > self.budget:
            raise PerturbationError(
                f"{len(self.added_users)} edits exceed budget {self.budget}")

    def to_dict(self) -> dict:
        return {
            "attack": self.attack_name,
            "target_item": self.target_item,
            "budget": self.budget,
            "added_users": list(self.added_users),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Perturbation":
        return cls(target_item=int(d["target_item"]), added_users=tuple(d["added_users"]),
                   budget=int(d["budget"]), attack_name=str(d["attack"]),
                   seed=None if d.get("seed") is None else int(d["seed"]))


# ---------------------------------------------------------------------------
# file io


def parse_interactions(lines: Iterable[str], num_users: int | None = None,
                       num_items: int | None = None) -> InteractionMatrix:
    users: list[int] = []
    items: list[int] = []
    max_user = -1
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            ids = [int(tok) for tok in tokens]
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
        if min(ids) < 0:
            raise DatasetFormatError(f"line {lineno}: negative id")
        max_user = max(max_user, ids[0])
        users.extend([ids[0]] * (len(ids) - 1))
        items.extend(ids[1:])
    if max_user < 0:
        raise DatasetFormatError("empty interaction file")
    num_users = max(num_users or 0, max_user + 1)
    return InteractionMatrix.from_pairs(users, items, num_users, num_items)


def load_interactions(path, num_users: int | None = None,
                      num_items: int | None = None) -> InteractionMatrix:
    """Read a ``user item item ...`` file.

    Dimensions default to ``1 + max id``; pass ``num_users``/``num_items``
    to align a train and test split that do not share the same maxima.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_interactions(fh, num_users, num_items)


def save_interactions(matrix: InteractionMatrix, path) -> None:
    indptr, indices = matrix.csr.indptr, matrix.csr.indices
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(matrix.num_users):
            items = indices[indptr[u]:indptr[u + 1]]
            if items.size:
                fh.write(" ".join(map(str, [u, *items.tolist()])) + "\n")


def load_split(train_path, test_path) -> tuple[InteractionMatrix, InteractionMatrix]:
    """Load a train/test pair sharing one (M, N) shape."""
    train = load_interactions(train_path)
    test = load_interactions(test_path)
    m = max(train.num_users, test.num_users)
    n = max(train.num_items, test.num_items)
    return (InteractionMatrix.from_pairs(*train.pairs(), m, n),
            InteractionMatrix.from_pairs(*test.pairs(), m, n))


def save_perturbation(p: Perturbation, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_perturbation(path) -> Perturbation:
    return Perturbation.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# degrees, normalization, percentiles


def compute_degrees(R: InteractionMatrix) -> DegreeProfile:
    user_deg = np.diff(R.csr.indptr).astype(np.int64)
    item_deg = np.bincount(R.csr.indices, minlength=R.num_items).astype(np.int64)
    return DegreeProfile(user_deg, item_deg, R.nnz / R.num_items)


def normalize(R: InteractionMatrix, degrees: DegreeProfile | None = None) -> NormalizedMatrix:
    """Scale each edge by ``1/sqrt(max(du,1) * max(di,1))``."""
    if degrees is None:
        degrees = compute_degrees(R)
    du = 1.0 / np.sqrt(np.maximum(degrees.user_degrees, 1).astype(np.float64))
    di = 1.0 / np.sqrt(np.maximum(degrees.item_degrees, 1).astype(np.float64))
    rows = np.repeat(np.arange(R.num_users), np.diff(R.csr.indptr))
    cols = R.csr.indices
    w = sp.csr_matrix((du[rows] * di[cols], cols.copy(), R.csr.indptr.copy()), shape=R.shape)
    return NormalizedMatrix(w, w.T.tocsr())


def select_item_percentile(degrees: DegreeProfile, q: float) -> tuple[int, np.ndarray]:
    """Degree at percentile ``q`` and the items sharing that degree.

    Items are ranked ascending by degree (ties by index); the threshold is
    the degree at rank ``floor(q/100 * (N-1))``.
    """
    if not 0 <= q <= 100:
        raise ValueError(f"percentile {q} outside [0, 100]")
    deg = degrees.item_degrees
    n = deg.size
    if n < 1:
        raise ValueError("no items")
    order = np.lexsort((np.arange(n), deg))
    rank = math.floor(q / 100 * (n - 1))
    threshold = int(deg[order[rank]])
    return threshold, np.flatnonzero(deg == threshold)


def percentile_degree(degrees: DegreeProfile, q: float) -> int:
    return select_item_percentile(degrees, q)[0]


def compute_budget(degrees: DegreeProfile, s: float, variant: int) -> int:
    """Perturbation budget for items at percentile ``s``, clamped to >= 1.

    variant 1: deg(Q65) - deg(Qs); variant 2: round(mean degree) - deg(Qs).
    """
    base = percentile_degree(degrees, s)
    if variant == 1:
        budget = percentile_degree(degrees, 65) - base
    elif variant == 2:
        budget = int(round(degrees.mean_item_degree)) - base
    else:
        raise ValueError(f"unknown budget variant {variant!r}")
    return max(int(budget), 1)


# ---------------------------------------------------------------------------
# perturbations


def validate_perturbation(R: InteractionMatrix, p: Perturbation) -> None:
    if not 0 <= p.target_item < R.num_items:
        raise PerturbationError(f"target item {p.target_item} out of range")
    col = R.column(p.target_item)
    for u in p.added_users:
        if not 0 <= u < R.num_users:
            raise PerturbationError(f"user {u} out of range")
        if col[u]:
            raise PerturbationError(f"edge ({u}, {p.target_item}) already present")


def apply_perturbation(R: InteractionMatrix, p: Perturbation) -> InteractionMatrix:
    """Return ``R`` with edges ``(u, target)`` added for every added user."""
    validate_perturbation(R, p)
    if not p.added_users:
        return R
    users, items = R.pairs()
    added = np.asarray(p.added_users, dtype=np.int64)
    return InteractionMatrix.from_pairs(
        np.concatenate([users, added]),
        np.concatenate([items, np.full(added.size, p.target_item, dtype=np.int64)]),
        R.num_users, R.num_items)


def apply_perturbations(R: InteractionMatrix, ps: Sequence[Perturbation]) -> InteractionMatrix:
    for p in ps:
        R = apply_perturbation(R, p)
    return R
