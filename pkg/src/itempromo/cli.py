"""Command-line entry point: generate, train, attack, eval, sweep.

Seed fan-out from the single ``--seed``:

* model initialisation and BPR sampling use the model seed (``--seed`` unless
  the checkpoint already fixes one);
* target-item sampling uses ``default_rng([seed, 7])``;
* RandFilter uses ``SeedSequence([seed, item])`` per target item;
* clean equal-degree items use ``default_rng([seed, 11])``;
* black-box victims use ``seed + 101 * k`` for the k-th victim (k = 1, 2, 3).

Every eval/sweep run writes ``run_config.json`` next to its reports; passing
it back through ``--config`` reproduces the run. Explicit flags override the
config file. Outputs default to ``$ITEMPROMO_OUTPUT_DIR`` (or ``.``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

OUTPUT_ENV = "ITEMPROMO_OUTPUT_DIR"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    test: str | None = None
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    protocol: str | None = None
    methods: list = field(default_factory=list)
    item_sets: list = field(default_factory=list)
    budget_variants: list = field(default_factory=list)
    budget: int | None = None
    ks: list = field(default_factory=list)
    items_per_set: int | None = None
    grid: list = field(default_factory=list)
    output_dir: str = "."
    seed: int = 0

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, ".")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults (flags win)")
    common.add_argument("--threads", type=_positive_int, help="cap on BLAS threads")
    p = argparse.ArgumentParser(prog="itempromo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, **kw) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], **kw)

    g = add("generate", help="write a synthetic two-community train/test split")
    g.add_argument("--users", type=_positive_int, default=1500)
    g.add_argument("--items", type=_positive_int, default=2000)
    g.add_argument("--mean-degree", type=float, default=24.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default=None)

    t = add("train", help="train a model and write a checkpoint")
    t.add_argument("--data")
    t.add_argument("--test")
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--dim", type=_positive_int, default=64)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--seed", type=int, default=2020)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--l2", type=float, default=1e-4)
    t.add_argument("--batch-size", type=_positive_int, default=2048)
    t.add_argument("--out", help="checkpoint path (default <out-dir>/model.ckpt)")
    t.add_argument("--log", help="epoch CSV log (default next to the checkpoint)")

    a = add("attack", help="craft one perturbation")
    _model_inputs(a)
    a.add_argument("--method", required=True, choices=["proposed", "randfilter", "iufilter", "rufilter"])
    a.add_argument("--target", type=int, required=True)
    a.add_argument("--budget", type=_positive_int, required=True)
    _attack_knobs(a)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="perturbation JSON (default <out-dir>/perturbation.json)")
    a.add_argument("--saliency", help="also dump the gradient column as CSV (proposed only)")

    for name, helptext in (("eval", "run an evaluation protocol"),
                           ("sweep", "budget or gamma sweep of the proposed attack")):
        e = add(name, help=helptext)
        _model_inputs(e)
        e.add_argument("--test")
        e.add_argument("--item-set", type=float, action="append", dest="item_sets")
        e.add_argument("--items", type=_positive_int, default=10, help="target items per set")
        e.add_argument("--target", type=int, action="append", dest="targets",
                       help="explicit target item(s) instead of sampling")
        e.add_argument("--budget", type=_positive_int, help="override the computed budget")
        e.add_argument("--budget-variant", type=int, choices=[1, 2], action="append",
                       dest="budget_variants")
        e.add_argument("--k", type=_positive_int, action="append", dest="ks")
        _attack_knobs(e)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out-dir", default=None)
        e.add_argument("--label", default="dataset", help="dataset label for reports")
        if name == "eval":
            e.add_argument("--protocol", choices=["whitebox", "blackbox", "retrain"], default="whitebox")
            e.add_argument("--method", action="append", dest="methods",
                           help="attack name or 'all' (repeatable)")
            e.add_argument("--victim", action="append", dest="victims",
                           help="black-box victim as LAYERS:DIM:SEED (default three standard setups)")
            e.add_argument("--victim-epochs", type=int, help="defaults to the checkpoint's epochs")
            e.add_argument("--joint-retrain", action="store_true",
                           help="one retrain per attack with all its perturbations applied")
        else:
            e.add_argument("--kind", choices=["budget", "gamma"], required=True)
            e.add_argument("--grid", type=float, nargs="*",
                           help="grid points (default 1..max-budget or 0.05..0.95 step 0.10)")
            e.add_argument("--max-budget", type=_positive_int)
    return p


def _model_inputs(p: argparse.ArgumentParser) -> None:
    # required, but may come from --config; checked after parsing
    p.add_argument("--data", help="training interactions")
    p.add_argument("--checkpoint")


def _attack_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=_unit, default=0.5)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--attack-k", type=_positive_int, default=50,
                   help="list length used inside the attack objective")


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            sub.error("config file must hold a JSON object")
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in _flatten_config(cfg).items() if k in known})
        args = parser.parse_args(argv)
    for name in ("data", "checkpoint"):
        if name in vars(args) and getattr(args, name) is None and \
                (name == "data" or args.command != "train"):
            sub.error(f"--{name} is required (on the command line or in --config)")
    return args


def _flatten_config(cfg: dict) -> dict:
    """Accept either flat flag names or a persisted RunConfig."""
    out = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    model = cfg.get("model") or {}
    for src, dst in (("num_layers", "layers"), ("embed_dim", "dim"), ("epochs", "epochs"),
                     ("learning_rate", "lr"), ("l2_reg", "l2"), ("batch_size", "batch_size")):
        if src in model:
            out[dst] = model[src]
    attack = cfg.get("attack") or {}
    for src, dst in (("lam", "lam"), ("gamma", "gamma"), ("K", "attack_k")):
        if src in attack:
            out[dst] = attack[src]
    if "items_per_set" in cfg:
        out["items"] = cfg["items_per_set"]
    if "output_dir" in cfg:
        out["out_dir"] = cfg["output_dir"]
    return out


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"itempromo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, IndexError) as exc:
        print(f"itempromo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    return {"generate": cmd_generate, "train": cmd_train, "attack": cmd_attack,
            "eval": cmd_eval, "sweep": cmd_sweep}[args.command](args)


def _out_dir(args) -> Path:
    d = Path(getattr(args, "out_dir", None) or _default_out())
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_generate(args) -> int:
    from .data import save_interactions
    from .synthetic import two_community_dataset

    train_m, test_m = two_community_dataset(args.users, args.items, seed=args.seed,
                                            mean_degree=args.mean_degree)
    out = _out_dir(args)
    save_interactions(train_m, out / "train.txt")
    save_interactions(test_m, out / "test.txt")
    print(f"wrote {out / 'train.txt'} ({train_m.nnz} interactions) and {out / 'test.txt'}")
    return 0


def cmd_train(args) -> int:
    from .data import load_interactions
    from .model import ModelConfig, evaluate_model, save_checkpoint
    from .training import train

    if args.layers < 0 or args.epochs < 0:
        raise UsageError("--layers and --epochs must be non-negative")
    R = load_interactions(args.data)
    cfg = ModelConfig(num_layers=args.layers, embed_dim=args.dim, seed=args.seed,
                      epochs=args.epochs, learning_rate=args.lr, l2_reg=args.l2,
                      batch_size=args.batch_size)
    ckpt = Path(args.out) if args.out else Path(_default_out()) / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log = Path(args.log) if args.log else ckpt.with_suffix(".log.csv")
    t0 = time.perf_counter()
    model = train(R, cfg, log_csv=log)
    save_checkpoint(model, ckpt)
    msg = f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s -> {ckpt}"
    if args.test:
        from .data import load_interactions as _load
        test = _load(args.test, R.num_users, R.num_items)
        p, r, n = evaluate_model(model, R, test, 20)
        msg += f"; precision@20={p:.4f} recall@20={r:.4f} ndcg@20={n:.4f}"
    print(msg)
    return 0


def _load_model_and_data(args):
    from .data import load_interactions
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    R = load_interactions(args.data, model.num_users, model.num_items)
    return model, R


def _attack_config(args, budget: int):
    from .attack import AttackConfig

    if not 0.0 <= args.gamma < 1.0:
        raise UsageError("--gamma must lie in [0, 1)")
    return AttackConfig(lam=args.lam, gamma=args.gamma, K=args.attack_k, budget=budget)


def cmd_attack(args) -> int:
    from .attack import run_attack, write_saliency_csv
    from .baselines import iu_filter, rand_filter, ru_filter
    from .data import save_perturbation

    model, R = _load_model_and_data(args)
    if not 0 <= args.target < R.num_items:
        raise UsageError(f"--target must lie in [0, {R.num_items})")
    sal = None
    if args.method == "proposed":
        p, sal = run_attack(model, R, args.target, _attack_config(args, args.budget),
                            return_saliency=True)
    elif args.method == "randfilter":
        p = rand_filter(R, args.target, args.budget, args.seed)
    elif args.method == "iufilter":
        p = iu_filter(R, args.target, args.budget)
    else:
        p = ru_filter(model, R, args.target, args.budget)
    out = Path(args.out) if args.out else Path(_default_out()) / "perturbation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_perturbation(p, out)
    if args.saliency:
        if sal is None:
            raise UsageError("--saliency is only available for --method proposed")
        write_saliency_csv(sal, p.added_users, args.saliency)
    print(f"{args.method}: added {len(p.added_users)} edges to item {p.target_item} -> {out}")
    return 0


def _methods(args) -> list[str]:
    from .evaluation import ATTACKS

    names = args.methods or ["all"]
    out = []
    for n in names:
        if n == "all":
            out.extend(ATTACKS)
        elif n in ATTACKS:
            out.append(n)
        else:
            raise UsageError(f"unknown method {n!r}; choose from {', '.join(ATTACKS)} or all")
    return list(dict.fromkeys(out))


def _victims(args, source):
    from .evaluation import standard_victims
    from .model import ModelConfig

    epochs = source.config.epochs if args.victim_epochs is None else args.victim_epochs
    base = dict(learning_rate=source.config.learning_rate, l2_reg=source.config.l2_reg,
                batch_size=source.config.batch_size)
    if not args.victims:
        return standard_victims(epochs, args.seed, **base)
    out = []
    for spec in args.victims:
        try:
            L, d, s = (int(x) for x in spec.split(":"))
        except ValueError:
            raise UsageError(f"--victim expects LAYERS:DIM:SEED, got {spec!r}") from None
        out.append(ModelConfig(num_layers=L, embed_dim=d, seed=s, epochs=epochs, **base))
    return out


def _targets_and_budgets(args, R):
    """Yield (item_set, budget_variant, budget, items) for every requested combination."""
    from .data import compute_budget, compute_degrees
    from .evaluation import sample_target_items

    deg = compute_degrees(R)
    sets = args.item_sets or [10.0]
    variants = args.budget_variants or [1]
    for s in sets:
        if not 0.0 <= s <= 100.0:
            raise UsageError("--item-set must lie in [0, 100]")
        items = (sorted(set(args.targets)) if args.targets
                 else sample_target_items(R, s, args.items, args.seed).tolist())
        for v in variants:
            budget = args.budget or compute_budget(deg, s, v)
            yield s, v, budget, items


def _run_config(args, model, **extra) -> RunConfig:
    return RunConfig(command=args.command, data=args.data, test=args.test,
                     checkpoint=args.checkpoint, model=model.config.to_dict(),
                     attack={"lam": args.lam, "gamma": args.gamma, "K": args.attack_k},
                     item_sets=args.item_sets or [10.0],
                     budget_variants=args.budget_variants or [1],
                     budget=args.budget, ks=sorted(set(args.ks or [50])),
                     items_per_set=args.items, output_dir=str(_out_dir(args)),
                     seed=args.seed, **extra)


def cmd_eval(args) -> int:
    from .data import apply_perturbations, load_interactions
    from .evaluation import (ExperimentReport, audit_recommendation_quality, craft_perturbations,
                             clean_counterparts, experiment_blackbox, experiment_retrain,
                             experiment_whitebox)

    model, R = _load_model_and_data(args)
    test = load_interactions(args.test, R.num_users, R.num_items) if args.test else None
    methods = _methods(args)
    ks = sorted(set(args.ks or [50]))
    out = _out_dir(args)
    report = ExperimentReport(args.label)
    for s, v, budget, items in _targets_and_budgets(args, R):
        cfg = _attack_config(args, budget)
        common = dict(K=ks, test=test, dataset=args.label, item_set=s, budget_variant=v)
        if args.protocol == "whitebox":
            part = experiment_whitebox(model, R, methods, items, budget=budget, attack_config=cfg,
                                       seed=args.seed, **common)
            if test is not None:
                crafted = craft_perturbations(model, R, methods, items, budget=budget,
                                              attack_config=cfg, seed=args.seed)
                for name, ps in crafted.items():
                    part.quality[f"{name}/q{s:g}/v{v}"] = audit_recommendation_quality(
                        model, None, R, apply_perturbations(R, ps), test, 20)
        elif args.protocol == "blackbox":
            part = experiment_blackbox(model, _victims(args, model), R, methods, items,
                                       budget=budget, attack_config=cfg, seed=args.seed, **common)
        else:
            crafted = craft_perturbations(model, R, methods, items, budget=budget,
                                          attack_config=cfg, seed=args.seed)
            clean = clean_counterparts(R, crafted[methods[0]], args.seed)
            part = experiment_retrain(R, crafted, model.config, clean_items=clean,
                                      joint=args.joint_retrain, **common)
        report.extend(part)
    sets = args.item_sets or [10.0]
    variants = args.budget_variants or [1]
    report.item_set = sets[0] if len(sets) == 1 else None
    report.budget_variant = variants[0] if len(variants) == 1 else None
    stem = f"report_{args.protocol}"
    report.write_csv(out / f"{stem}.csv")
    report.write_json(out / f"{stem}.json")
    _run_config(args, model, protocol=args.protocol, methods=methods).write(out / "run_config.json")
    for m in methods:
        print(f"{args.protocol} {m}: " + ", ".join(
            f"PHN@{k}={report.mean(m, k):.2f}" for k in ks))
    print(f"wrote {out / (stem + '.csv')} and {out / (stem + '.json')}")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import ExperimentReport, budget_sweep, gamma_grid, gamma_sweep

    model, R = _load_model_and_data(args)
    ks = sorted(set(args.ks or [50]))
    out = _out_dir(args)
    report = ExperimentReport(args.label)
    grid: list
    for s, v, budget, items in _targets_and_budgets(args, R):
        if args.kind == "budget":
            top = args.max_budget or budget
            grid = sorted(set(int(g) for g in args.grid)) if args.grid is not None else \
                list(range(1, top + 1))
            if not grid:
                raise UsageError("empty budget grid")
            if grid[0] < 1:
                raise UsageError("budget grid points must be positive")
            part = budget_sweep(model, R, items, grid, K=ks,
                                attack_config=_attack_config(args, max(grid)),
                                seed=args.seed, dataset=args.label)
        else:
            grid = list(args.grid) if args.grid is not None else gamma_grid()
            if not grid:
                raise UsageError("empty gamma grid")
            if any(not 0.0 <= g < 1.0 for g in grid):
                raise UsageError("gamma grid points must lie in [0, 1)")
            per = gamma_sweep(model, R, items, grid, budget=budget, K=ks,
                              attack_config=_attack_config(args, budget), seed=args.seed,
                              dataset=args.label)
            part = ExperimentReport(args.label)
            for g, rep in per.items():
                part.rows.extend(rep.rows)
        _write_sweep(out / f"sweep_{args.kind}_q{s:g}_v{v}.csv", args.kind, grid, part, ks, s)
        report.extend(part)
    _run_config(args, model, protocol=f"sweep-{args.kind}", methods=["proposed"],
                grid=list(grid)).write(out / "run_config.json")
    print(f"wrote {args.kind} sweep to {out}")
    return 0


def _write_sweep(path: Path, kind: str, grid, report, ks, item_set) -> None:
    """One row per grid point with mean HN/PHN per K."""
    import csv

    per_point = len(report.rows) // len(grid)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([kind, "item_set", "items"] + [f"{m}@{k}" for k in ks for m in ("hn", "phn")])
        for n, g in enumerate(grid):
            if kind == "budget":
                rows = [r for r in report.rows if r.budget == g]
            else:
                rows = report.rows[n * per_point:(n + 1) * per_point]
            line = [g, item_set, len({r.target_item for r in rows})]
            for k in ks:
                sel = [r for r in rows if r.K == k]
                line += [sum(r.hn for r in sel) / len(sel), sum(r.phn for r in sel) / len(sel)]
            w.writerow(line)


if __name__ == "__main__":
    sys.exit(main())
