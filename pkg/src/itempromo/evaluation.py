"""Promotion metrics and the white-box, black-box and retraining protocols.

PHN counts hits over users that were *not* given the new edge. Those users
hold the target as a training positive afterwards, so it can never appear in
their lists; PHN therefore equals HN computed on the perturbed graph. It never
goes negative, unlike the literal "HN minus budget" reading.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .attack import AttackConfig, AttackGraph, grad_target_column, mask_users, \
    recommendation_lists, run_attack, select_topk_edges, build_mask_and_perturb, _forward
from .baselines import iu_filter, rand_filter, ru_filter
from .data import InteractionMatrix, Perturbation, apply_perturbation, apply_perturbations, \
    compute_degrees
from .model import ModelConfig, RecommendationList, TrainedModel, rec_metrics, recommend_topk
from .training import train

ATTACKS = ("proposed", "randfilter", "iufilter", "rufilter")

CSV_COLUMNS = ("dataset", "protocol", "attack", "item_set", "budget", "K", "target_item",
               "seed", "hn", "phn", "precision", "recall", "ndcg")


@dataclass(frozen=True)
class PromotionResult:
    target_item: int
    attack: str
    budget: int
    K: int
    hn: int
    phn: int
    seed: int | None = None
    protocol: str = "whitebox"
    precision: float = math.nan
    recall: float = math.nan
    ndcg: float = math.nan
    per_seed: tuple = ()
    item_set: float | None = None

    def __post_init__(self):
        if not 0 <= self.phn <= self.hn:
            raise ValueError(f"need 0 <= phn <= hn, got phn={self.phn} hn={self.hn}")


@dataclass(frozen=True)
class QualityAudit:
    """Precision/recall/NDCG before and after a perturbation."""

    K: int
    before: tuple[float, float, float]
    after: tuple[float, float, float]

    @property
    def absolute(self) -> dict[str, float]:
        return {n: a - b for n, b, a in zip(("precision", "recall", "ndcg"), self.before, self.after)}

    @property
    def relative(self) -> dict[str, float]:
        out = {}
        for n, b, a in zip(("precision", "recall", "ndcg"), self.before, self.after):
            out[n] = (a - b) / b if b else (0.0 if a == b else math.inf)
        return out


@dataclass
class ExperimentReport:
    dataset: str = "dataset"
    item_set: float | None = None
    budget_variant: int | None = None
    rows: list[PromotionResult] = field(default_factory=list)
    quality: dict[str, QualityAudit] = field(default_factory=dict)

    def select(self, attack: str | None = None, K: int | None = None, **match) -> list[PromotionResult]:
        out = []
        for r in self.rows:
            if attack is not None and r.attack != attack:
                continue
            if K is not None and r.K != K:
                continue
            if any(getattr(r, k) != v for k, v in match.items()):
                continue
            out.append(r)
        return out

    def mean(self, attack: str, K: int | None = None, metric: str = "phn", **match) -> float:
        rows = self.select(attack, K, **match)
        if not rows:
            raise KeyError(f"no rows for attack {attack!r}")
        return float(np.mean([getattr(r, metric) for r in rows]))

    def attacks(self) -> list[str]:
        return list(dict.fromkeys(r.attack for r in self.rows))

    def summary(self) -> dict:
        groups: dict[tuple, list[PromotionResult]] = {}
        for r in self.rows:
            groups.setdefault((r.protocol, r.attack, r.budget, r.K), []).append(r)
        means = []
        for (protocol, attack, budget, K), rows in groups.items():
            means.append({"protocol": protocol, "attack": attack, "budget": budget, "K": K,
                          "count": len(rows),
                          "mean_hn": float(np.mean([r.hn for r in rows])),
                          "mean_phn": float(np.mean([r.phn for r in rows]))})
        return {
            "dataset": self.dataset,
            "item_set": self.item_set,
            "budget_variant": self.budget_variant,
            "phn_definition": "hits among users not added by the perturbation",
            "rows": len(self.rows),
            "means": means,
            "quality": {name: {"K": q.K, "before": list(q.before), "after": list(q.after),
                               "absolute": q.absolute, "relative": q.relative}
                        for name, q in self.quality.items()},
        }

    def extend(self, other: "ExperimentReport") -> "ExperimentReport":
        # rows remember the item set of the report they came from
        self.rows.extend(r if r.item_set is not None or other.item_set is None
                         else replace(r, item_set=other.item_set) for r in other.rows)
        self.quality.update(other.quality)
        return self

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([self.dataset, r.protocol, r.attack,
                            _item_set(r.item_set if r.item_set is not None else self.item_set),
                            r.budget, r.K, r.target_item, "" if r.seed is None else r.seed,
                            r.hn, r.phn, _fmt(r.precision), _fmt(r.recall), _fmt(r.ndcg)])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, allow_nan=False, default=_json_default)
            fh.write("\n")


def _item_set(s: float | None) -> str:
    return "" if s is None else f"{s:g}"


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(type(x).__name__)


# ---------------------------------------------------------------------------
# metrics


def hit_number(recs: RecommendationList, t: int, K: int) -> int:
    """Number of users whose first ``K`` recommendations contain ``t``."""
    if K > recs.K:
        raise ValueError(f"lists hold {recs.K} items, asked for K={K}")
    return int((recs.items[:, :K] == t).any(axis=1).sum())


def pruned_hit_number(recs: RecommendationList, t: int, K: int,
                      perturbation: Perturbation | None = None) -> int:
    """Hit number restricted to users the perturbation did not touch."""
    if K > recs.K:
        raise ValueError(f"lists hold {recs.K} items, asked for K={K}")
    hit = (recs.items[:, :K] == t).any(axis=1)
    if perturbation is not None and perturbation.added_users:
        hit &= ~np.isin(recs.users, np.asarray(perturbation.added_users, dtype=np.int64))
    return int(hit.sum())


# ---------------------------------------------------------------------------
# attack registry


def make_perturbation(name: str, model: TrainedModel, R: InteractionMatrix, t: int,
                      budget: int, attack_config: AttackConfig | None = None,
                      seed: int = 0) -> Perturbation:
    """Run attack ``name`` on item ``t``. ``seed`` only matters for RandFilter."""
    if name == "proposed":
        cfg = replace(attack_config or AttackConfig(), budget=budget)
        return run_attack(model, R, t, cfg)
    if name == "randfilter":
        return rand_filter(R, t, budget, _item_seed(seed, t))
    if name == "iufilter":
        return iu_filter(R, t, budget)
    if name == "rufilter":
        return ru_filter(model, R, t, budget)
    if name == "none":
        return Perturbation(t, (), budget, "none")
    raise KeyError(f"unknown attack {name!r}; expected one of {ATTACKS}")


def _item_seed(seed: int, t: int) -> int:
    # independent stream per (global seed, item); same for every attack in a report
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def sample_target_items(R: InteractionMatrix, q: float, count: int, seed: int) -> np.ndarray:
    """``count`` items (without replacement) from the degree set at percentile ``q``."""
    from .data import select_item_percentile
    _, items = select_item_percentile(compute_degrees(R), q)
    rng = np.random.default_rng([seed, 7])
    k = min(count, items.size)
    return np.sort(rng.choice(items, size=k, replace=False))


def _as_list(x) -> list:
    if isinstance(x, (str, int, np.integer)):
        return [x]
    return list(x)


def _ks(K) -> list[int]:
    ks = sorted(set(int(k) for k in _as_list(K)))
    if not ks or ks[0] < 1:
        raise ValueError("K values must be positive")
    return ks


def _score_rows(model_emb, Rp: InteractionMatrix, p: Perturbation, ks: Sequence[int],
                test: InteractionMatrix | None, *, attack: str, budget: int, seed, protocol: str):
    recs = recommend_topk(model_emb, Rp, max(ks))
    rows = []
    for k in ks:
        prec = rec = nd = math.nan
        if test is not None:
            prec, rec, nd = _metrics_at(recs, test, k)
        rows.append(PromotionResult(p.target_item, attack, budget, k,
                                    hit_number(recs, p.target_item, k),
                                    pruned_hit_number(recs, p.target_item, k, p),
                                    seed, protocol, prec, rec, nd))
    return rows


def _metrics_at(recs: RecommendationList, test: InteractionMatrix, k: int):
    has = np.diff(test.csr.indptr)[recs.users] > 0
    sub = RecommendationList(k, recs.items[has, :k], recs.users[has])
    return rec_metrics(sub, test)


# ---------------------------------------------------------------------------
# protocols


def experiment_whitebox(model: TrainedModel, R: InteractionMatrix, attack, items: Iterable[int], *,
                        budget: int, K=50, attack_config: AttackConfig | None = None,
                        seed: int = 0, test: InteractionMatrix | None = None,
                        dataset: str = "dataset", item_set: float | None = None,
                        budget_variant: int | None = None) -> ExperimentReport:
    """Attack each item, then re-propagate the fixed trained tables over the perturbed graph.

    ``attack`` is one name or a list of names; every attack sees the same items
    and seed, so rows are paired.
    """
    ks = _ks(K)
    report = ExperimentReport(dataset, item_set, budget_variant)
    for t in (int(x) for x in items):
        for name in _as_list(attack):
            p = make_perturbation(name, model, R, t, budget, attack_config, seed)
            Rp = apply_perturbation(R, p)
            report.rows.extend(_score_rows(model.embed(Rp), Rp, p, ks, test, attack=name,
                                           budget=budget, seed=seed, protocol="whitebox"))
    return report


def craft_perturbations(model: TrainedModel, R: InteractionMatrix, attack, items, *, budget: int,
                        attack_config: AttackConfig | None = None,
                        seed: int = 0) -> dict[str, list[Perturbation]]:
    out: dict[str, list[Perturbation]] = {}
    for name in _as_list(attack):
        out[name] = [make_perturbation(name, model, R, int(t), budget, attack_config, seed)
                     for t in items]
    return out


def victim_label(cfg: ModelConfig) -> str:
    return f"blackbox/L{cfg.num_layers}d{cfg.embed_dim}s{cfg.seed}"


def standard_victims(epochs: int, seed: int = 0, **overrides) -> list[ModelConfig]:
    """Victim setups following the (L, d) pattern 2/64, 2/128, 3/128 with distinct seeds."""
    shapes = [(2, 64), (2, 128), (3, 128)]
    return [ModelConfig(num_layers=L, embed_dim=d, epochs=epochs, seed=seed + 101 * (k + 1),
                        **overrides) for k, (L, d) in enumerate(shapes)]


def experiment_blackbox(source_model: TrainedModel, victims: Sequence[ModelConfig | TrainedModel],
                        R: InteractionMatrix, attack, items, *, budget: int, K=50,
                        attack_config: AttackConfig | None = None, seed: int = 0,
                        test: InteractionMatrix | None = None, dataset: str = "dataset",
                        item_set: float | None = None,
                        budget_variant: int | None = None) -> ExperimentReport:
    """Craft on ``source_model``; evaluate on victims trained on the clean graph.

    Victims given as configs are trained here. The row's ``protocol`` names the
    victim as ``blackbox/L<layers>d<dim>s<seed>``.
    """
    ks = _ks(K)
    report = ExperimentReport(dataset, item_set, budget_variant)
    crafted = craft_perturbations(source_model, R, attack, items, budget=budget,
                                  attack_config=attack_config, seed=seed)
    for v in victims:
        victim = v if isinstance(v, TrainedModel) else train(R, v)
        label = victim_label(victim.config)
        for name, ps in crafted.items():
            for p in ps:
                Rp = apply_perturbation(R, p)
                report.rows.extend(_score_rows(victim.embed(Rp), Rp, p, ks, test, attack=name,
                                               budget=budget, seed=victim.config.seed,
                                               protocol=label))
    return report


def equal_degree_items(R: InteractionMatrix, targets: Sequence[int], seed: int = 0,
                       offsets: Sequence[int] | None = None) -> list[int]:
    """For each target an untargeted item of degree ``deg(t) + offset`` (or the closest).

    With ``offsets`` set to the perturbation sizes this picks clean items as
    popular as the promoted targets become once their edges are added.
    """
    deg = compute_degrees(R).item_degrees
    if offsets is None:
        offsets = [0] * len(targets)
    taken = set(int(t) for t in targets)
    rng = np.random.default_rng([seed, 11])
    out = []
    for t, off in zip(targets, offsets):
        free = np.array([i for i in range(deg.size) if i not in taken])
        gap = np.abs(deg[free] - (deg[int(t)] + int(off)))
        pool = free[gap == gap.min()]
        c = int(rng.choice(pool))
        taken.add(c)
        out.append(c)
    return out


def clean_counterparts(R: InteractionMatrix, perturbations: Sequence[Perturbation],
                       seed: int = 0) -> list[int]:
    return equal_degree_items(R, [p.target_item for p in perturbations], seed,
                              [len(p.added_users) for p in perturbations])


def experiment_retrain(R: InteractionMatrix, attack_outputs: dict[str, Sequence[Perturbation]],
                       train_config: ModelConfig, *, K=50, test: InteractionMatrix | None = None,
                       clean_items: Sequence[int] | None = None, joint: bool = False,
                       dataset: str = "dataset", item_set: float | None = None,
                       budget_variant: int | None = None,
                       trainer: Callable[[InteractionMatrix, ModelConfig], TrainedModel] = train,
                       ) -> ExperimentReport:
    """Retrain from scratch on each perturbed graph and measure PHN.

    With ``joint=False`` every perturbation gets its own retrain. ``joint=True``
    applies all of an attack's perturbations at once and retrains once per
    attack, which is far cheaper and leaves disjoint target columns untouched.

    ``clean_items`` (one per target, aligned with the first attack's list) are
    scored as ``attack="clean"`` in the same retrained models as that attack,
    giving the paired target-vs-clean-item comparison.
    """
    ks = _ks(K)
    report = ExperimentReport(dataset, item_set, budget_variant)
    names = list(attack_outputs)
    seed = train_config.seed
    for pos, name in enumerate(names):
        ps = list(attack_outputs[name])
        with_clean = clean_items is not None and pos == 0
        if joint:
            Rp = apply_perturbations(R, ps)
            groups = [(Rp, ps, list(range(len(ps))))]
        else:
            groups = [(apply_perturbation(R, p), [p], [k]) for k, p in enumerate(ps)]
        for Rp, group, idx in groups:
            model = trainer(Rp, train_config)
            emb = model.embed(Rp)
            for k, p in zip(idx, group):
                report.rows.extend(_score_rows(emb, Rp, p, ks, test, attack=name,
                                               budget=p.budget, seed=seed, protocol="retrain"))
                if with_clean:
                    c = Perturbation(int(clean_items[k]), (), p.budget, "clean")
                    report.rows.extend(_score_rows(emb, Rp, c, ks, None, attack="clean",
                                                   budget=p.budget, seed=seed,
                                                   protocol="retrain"))
    return report


def audit_recommendation_quality(model_before: TrainedModel, model_after: TrainedModel | None,
                                 R_clean: InteractionMatrix, R_pert: InteractionMatrix,
                                 test: InteractionMatrix, K: int = 20) -> QualityAudit:
    """Metrics on the clean graph vs the perturbed graph.

    ``model_after=None`` reuses ``model_before`` (white-box setting).
    """
    after = model_before if model_after is None else model_after
    users = np.flatnonzero(np.diff(test.csr.indptr) > 0)
    before = rec_metrics(recommend_topk(model_before.embed(R_clean), R_clean, K, users=users), test)
    post = rec_metrics(recommend_topk(after.embed(R_pert), R_pert, K, users=users), test)
    return QualityAudit(K, before, post)


# ---------------------------------------------------------------------------
# sweeps


def budget_sweep(model: TrainedModel, R: InteractionMatrix, items, budgets: Sequence[int], *,
                 K=50, attack_config: AttackConfig | None = None, seed: int = 0,
                 dataset: str = "dataset") -> ExperimentReport:
    """Proposed attack at several budgets. The saliency column is computed once per item."""
    budgets = sorted(set(int(b) for b in budgets))
    if not budgets:
        raise ValueError("empty budget grid")
    if budgets[0] < 1:
        raise ValueError("budgets must be positive")
    cfg = attack_config or AttackConfig()
    ks = _ks(K)
    report = ExperimentReport(dataset)
    graph = AttackGraph(R)
    layers, emb = _forward(model, graph)
    for t in (int(x) for x in items):
        masked = mask_users(model, R, t, cfg.gamma, max(cfg.pool_size, budgets[-1]), emb=emb)
        omega = recommendation_lists(emb, R, masked.users, cfg.K)
        sal = grad_target_column(model, graph, t, masked, cfg.lam, cfg.K,
                                 layers=layers, emb=emb, omega=omega)
        for b in budgets:
            p = build_mask_and_perturb(R, t, select_topk_edges(sal, b), b)
            Rp = apply_perturbation(R, p)
            report.rows.extend(_score_rows(model.embed(Rp), Rp, p, ks, None, attack="proposed",
                                           budget=b, seed=seed, protocol="whitebox"))
    return report


def gamma_grid(start: float = 0.05, stop: float = 0.95, step: float = 0.10) -> list[float]:
    n = int(round((stop - start) / step))
    return [round(start + k * step, 10) for k in range(n + 1)]


def gamma_sweep(model: TrainedModel, R: InteractionMatrix, items, gammas: Sequence[float], *,
                budget: int, K=50, attack_config: AttackConfig | None = None, seed: int = 0,
                dataset: str = "dataset") -> dict[float, ExperimentReport]:
    """White-box proposed attack at each masking threshold."""
    gammas = list(gammas)
    if not gammas:
        raise ValueError("empty gamma grid")
    base = attack_config or AttackConfig()
    return {g: experiment_whitebox(model, R, "proposed", items, budget=budget, K=K,
                                   attack_config=replace(base, gamma=g), seed=seed,
                                   dataset=dataset)
            for g in gammas}

