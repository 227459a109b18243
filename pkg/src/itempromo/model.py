"""LightGCN-style forward model: propagation, layer combination, scoring, top-K."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import InteractionMatrix, NormalizedMatrix, compute_degrees, normalize

INIT_STD = 0.1
# rows scored per chunk when ranking; bounds the transient (rows x N) buffer
_SCORE_CHUNK_NUMBERS = 1 << 20


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    embed_dim: int = 64
    layer_weights: tuple[float, ...] | None = None
    seed: int = 2020
    epochs: int = 1000
    learning_rate: float = 1e-3
    l2_reg: float = 1e-4
    batch_size: int = 2048

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.l2_reg < 0:
            raise ValueError("invalid training hyperparameters")
        if self.layer_weights is not None:
            w = tuple(float(a) for a in self.layer_weights)
            if len(w) != self.num_layers + 1 or min(w) < 0:
                raise ValueError("layer_weights must be L+1 nonnegative numbers")
            object.__setattr__(self, "layer_weights", w)

    @property
    def alphas(self) -> np.ndarray:
        if self.layer_weights is None:
            return np.full(self.num_layers + 1, 1.0 / (self.num_layers + 1))
        return np.asarray(self.layer_weights, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_weights"] = None if self.layer_weights is None else list(self.layer_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("layer_weights") is not None:
            d["layer_weights"] = tuple(d["layer_weights"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        if self.users.ndim != 2 or self.items.ndim != 2 or self.users.shape[1] != self.items.shape[1]:
            raise ValueError("embedding tables must be 2-D with equal width")

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    def scaled(self, a: float) -> "EmbeddingTable":
        return EmbeddingTable(a * self.users, a * self.items)

    def __add__(self, other: "EmbeddingTable") -> "EmbeddingTable":
        return EmbeddingTable(self.users + other.users, self.items + other.items)

    def astype(self, dtype) -> "EmbeddingTable":
        return EmbeddingTable(self.users.astype(dtype), self.items.astype(dtype))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.users).all() and np.isfinite(self.items).all())


@dataclass(frozen=True, eq=False)
class TrainedModel:
    config: ModelConfig
    embeddings: EmbeddingTable
    num_users: int
    num_items: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.embeddings.users.shape[0] != self.num_users:
            raise ValueError("user embedding rows do not match num_users")
        if self.embeddings.items.shape[0] != self.num_items:
            raise ValueError("item embedding rows do not match num_items")
        for arr in (self.embeddings.users, self.embeddings.items):
            arr.flags.writeable = False

    def layers(self, graph: InteractionMatrix | NormalizedMatrix) -> list[EmbeddingTable]:
        norm = graph if isinstance(graph, NormalizedMatrix) else normalize(graph)
        return propagate(norm, self.embeddings.astype(np.float64), self.config.num_layers)

    def embed(self, graph: InteractionMatrix | NormalizedMatrix) -> EmbeddingTable:
        """Final (combined) embeddings of this model over ``graph``.

        The last interaction matrix seen is memoized since attacks and
        evaluations repeatedly query the clean graph.
        """
        if isinstance(graph, InteractionMatrix):
            hit = self._cache.get("embed")
            if hit is not None and hit[0] is graph:
                return hit[1]
        out = combine(self.layers(graph), self.config.alphas)
        if isinstance(graph, InteractionMatrix):
            self._cache["embed"] = (graph, out)
        return out


@dataclass(frozen=True)
class RecommendationList:
    """Per-user top-K lists, padded with -1 where fewer than K candidates exist."""

    K: int
    items: np.ndarray
    users: np.ndarray

    def for_user(self, row: int) -> np.ndarray:
        r = self.items[row]
        return r[r >= 0]


# ---------------------------------------------------------------------------
# forward pass


def init_embeddings(config: ModelConfig, num_users: int, num_items: int) -> EmbeddingTable:
    """Gaussian(0, 0.1) tables drawn from ``config.seed``; float32 storage."""
    if num_users < 1 or num_items < 1:
        raise ValueError("need at least one user and one item")
    rng = np.random.default_rng(config.seed)
    users = rng.normal(0.0, INIT_STD, size=(num_users, config.embed_dim)).astype(np.float32)
    items = rng.normal(0.0, INIT_STD, size=(num_items, config.embed_dim)).astype(np.float32)
    return EmbeddingTable(users, items)


def propagate(norm: NormalizedMatrix, E0: EmbeddingTable, num_layers: int) -> list[EmbeddingTable]:
    """Layers 0..L of linear propagation over the bipartite graph."""
    m, n = norm.shape
    if E0.users.shape[0] != m or E0.items.shape[0] != n:
        raise ValueError(f"embedding rows {(E0.users.shape[0], E0.items.shape[0])} "
                         f"do not match graph shape {(m, n)}")
    layers = [E0]
    for _ in range(num_layers):
        prev = layers[-1]
        layers.append(EmbeddingTable(norm.weights @ prev.items, norm.weights_t @ prev.users))
    return layers


def combine(layers: Sequence[EmbeddingTable], alphas) -> EmbeddingTable:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (len(layers),):
        raise ValueError(f"{alphas.size} layer weights for {len(layers)} layers")
    users = sum(a * layer.users for a, layer in zip(alphas, layers))
    items = sum(a * layer.items for a, layer in zip(alphas, layers))
    return EmbeddingTable(np.asarray(users, dtype=np.float64), np.asarray(items, dtype=np.float64))


def score(emb: EmbeddingTable, user: int, item: int) -> float:
    _check_index(user, emb.users.shape[0], "user")
    _check_index(item, emb.items.shape[0], "item")
    return float(emb.users[user] @ emb.items[item])


def score_all_items(emb: EmbeddingTable, user: int) -> np.ndarray:
    _check_index(user, emb.users.shape[0], "user")
    return emb.items @ emb.users[user]


def _check_index(i: int, n: int, what: str) -> None:
    if not 0 <= i < n:
        raise IndexError(f"{what} index {i} out of range [0, {n})")


# ---------------------------------------------------------------------------
# ranking


def topk_rows(scores: np.ndarray, K: int) -> np.ndarray:
    """Top-K column indices per row, descending score, ties by ascending index.

    Entries equal to -inf are treated as excluded and padded with -1.
    """
    rows, n = scores.shape
    k = min(K, n)
    out = np.full((rows, K), -1, dtype=np.int64)
    if k == 0 or rows == 0:
        return out
    if k < n:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
    else:
        kth = scores.min(axis=1)
    for r in range(rows):
        s = scores[r]
        cand = np.flatnonzero(s >= kth[r])
        # ordering on (-score, index) also resolves ties straddling the boundary
        cand = cand[np.lexsort((cand, -s[cand]))][:k]
        cand = cand[np.isfinite(s[cand])]
        out[r, :cand.size] = cand
    return out


def recommend_topk(emb: EmbeddingTable, R_train: InteractionMatrix, K: int,
                   users=None) -> RecommendationList:
    """Rank all non-training items for each user and keep the best ``K``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    users = np.arange(R_train.num_users) if users is None else np.asarray(users, dtype=np.int64)
    n = R_train.num_items
    chunk = max(1, _SCORE_CHUNK_NUMBERS // n)
    lists = np.full((users.size, K), -1, dtype=np.int64)
    csr = R_train.csr
    for lo in range(0, users.size, chunk):
        block = users[lo:lo + chunk]
        s = emb.users[block] @ emb.items.T
        sub = csr[block]
        rows = np.repeat(np.arange(block.size), np.diff(sub.indptr))
        s[rows, sub.indices] = -np.inf
        lists[lo:lo + block.size] = topk_rows(s, K)
    return RecommendationList(K, lists, users)


def rec_metrics(recs: RecommendationList, test: InteractionMatrix) -> tuple[float, float, float]:
    """Precision@K, recall@K and NDCG@K averaged over users with test positives."""
    K = recs.K
    discounts = 1.0 / np.log2(np.arange(2, K + 2))
    precision = recall = ndcg = 0.0
    counted = 0
    for row, u in enumerate(recs.users):
        truth = test.positives(int(u))
        if truth.size == 0:
            continue
        ranked = recs.items[row]
        hits = np.isin(ranked, truth) & (ranked >= 0)
        nh = int(hits.sum())
        precision += nh / K
        recall += nh / truth.size
        idcg = discounts[:min(truth.size, K)].sum()
        ndcg += float(discounts[hits].sum() / idcg)
        counted += 1
    if counted == 0:
        return 0.0, 0.0, 0.0
    return precision / counted, recall / counted, ndcg / counted


def evaluate_model(model: TrainedModel, R_train: InteractionMatrix, test: InteractionMatrix,
                   K: int = 20) -> tuple[float, float, float]:
    users = np.flatnonzero(np.diff(test.csr.indptr) > 0)
    recs = recommend_topk(model.embed(R_train), R_train, K, users=users)
    return rec_metrics(recs, test)


# ---------------------------------------------------------------------------
# checkpoint io
#
# layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON header,
# then users (M x d) and items (N x d) as row-major little-endian float32.

_MAGIC = b"IPCKPT01"


def save_checkpoint(model: TrainedModel, path) -> None:
    cfg = model.config
    header = {
        "M": model.num_users,
        "N": model.num_items,
        "d": cfg.embed_dim,
        "L": cfg.num_layers,
        "alpha": cfg.alphas.tolist(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "config": cfg.to_dict(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(model.embeddings.users, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.embeddings.items, dtype="<f4").tobytes())


def load_checkpoint(path) -> TrainedModel:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    m, n, d = header["M"], header["N"], header["d"]
    body = np.frombuffer(blob, dtype="<f4", offset=12 + hlen)
    if body.size != (m + n) * d:
        raise ValueError(f"{path}: truncated embedding payload")
    users = body[:m * d].reshape(m, d).astype(np.float32)
    items = body[m * d:].reshape(n, d).astype(np.float32)
    return TrainedModel(ModelConfig.from_dict(header["config"]), EmbeddingTable(users, items), m, n)
