"""Command line entry point: collect, train, search, federate, sweep, report, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .codec import CodecConfig, load_checkpoint, save_checkpoint, train_codec
from .collector import CollectorConfig, run_collector
from .data import SubsetEvaluator
from .experiment import DatasetSpec, ExperimentConfig, format_summary, run_experiment, sweep_lambda, write_summary
from .federation import FederationConfig
from .records import RecordStore
from .search import SearchConfig, search

log = logging.getLogger("latentfs")


def _parse_kv(text: str | None) -> dict:
    """``"a=1,b=0.5"`` -> ``{"a": 1, "b": 0.5}``."""
    out = {}
    for part in filter(None, (text or "").split(",")):
        key, _, value = part.partition("=")
        out[key.strip()] = json.loads(value)
    return out


def _dataset_args(p):
    p.add_argument("--dataset", help="CSV path with a header row; omit to use the synthetic dataset")
    p.add_argument("--target", help="target column name")
    p.add_argument("--task", default="binary", choices=["binary", "multiclass", "regression"])
    p.add_argument("--synthetic", default="", help="make_synthetic overrides, e.g. n_samples=300,n_features=20")


def _dataset_spec(args) -> DatasetSpec:
    return DatasetSpec(path=args.dataset, target=args.target, task=args.task,
                       synthetic=_parse_kv(args.synthetic) or None)


def _eval_args(p):
    p.add_argument("--model", default="tree_ensemble")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--n-estimators", type=int, default=100)


def _search_args(p):
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--search-epochs", type=int, default=10)
    p.add_argument("--n-seeds", type=int, default=25)


def _search_config(args) -> SearchConfig:
    return SearchConfig(lam=args.lam, steps=args.steps, epochs=args.search_epochs, n_seeds=args.n_seeds)


def cmd_collect(args):
    ds = _dataset_spec(args).load()
    cfg = CollectorConfig(mode=args.mode, epochs=args.epochs, model_kind=args.model, cv_folds=args.folds,
                          n_estimators=args.n_estimators)
    store = run_collector(ds, cfg, seed=args.seed)
    store.save(args.out)
    print(f"wrote {len(store)} records to {args.out}")


def cmd_train(args):
    store = RecordStore.load(args.records, args.universe)
    cfg = CodecConfig(universe_size=args.universe, d=args.d, heads=args.heads, M=args.M, epochs=args.epochs,
                      batch=args.batch, lr=args.lr, augment=args.augment)
    codec, losses = train_codec(store, cfg, seed=args.seed, log_every=args.log_every)
    save_checkpoint(codec, args.checkpoint)
    print(f"final loss {losses[-1]:.4f}; checkpoint {args.checkpoint}")


def cmd_search(args):
    codec = load_checkpoint(args.checkpoint)
    ds = _dataset_spec(args).load()
    store = RecordStore.load(args.records, ds.n_features)
    evaluator = SubsetEvaluator(ds, args.model, args.folds, 0, args.n_estimators)
    best, report = search(codec, store, evaluator, _search_config(args), seed=args.seed)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"best {list(best.canonical)} perf {report['best_perf']:.4f}")


def _experiment_config(args, mode) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        cfg = replace(cfg, mode=mode)
    else:
        cfg = ExperimentConfig(
            dataset=_dataset_spec(args), mode=mode,
            collector=CollectorConfig(epochs=args.collect_epochs, model_kind=args.model, cv_folds=args.folds,
                                      n_estimators=args.n_estimators),
            codec={"epochs": args.codec_epochs},
            search=_search_config(args),
            federation=FederationConfig(n_clients=args.clients, strategy=args.strategy, param=args.param,
                                        calibration_interval=args.calibration_interval),
            seed=args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_run(args, mode="centralized"):
    summary = run_experiment(_experiment_config(args, mode), log=log.info)
    print(format_summary(summary))


def cmd_federate(args):
    cmd_run(args, "federated")


def cmd_sweep(args):
    values = [float(v) for v in filter(None, args.values.split(","))]
    cfg = _experiment_config(args, args.mode)
    rows = sweep_lambda(cfg, values, log=log.info)
    cols = [k for k in rows[0] if k != "default"] if rows else []
    print("  ".join(f"{c:>10}" for c in cols))
    for row in rows:
        mark = " *" if row["default"] else ""
        print("  ".join(f"{row.get(c, ''):>10.4f}" if isinstance(row.get(c), float) else f"{str(row.get(c, '')):>10}"
                        for c in cols) + mark)
    if any("error" in r for r in rows):
        return 1


def cmd_report(args):
    print(format_summary(write_summary(args.run_dir)))


def _experiment_args(p):
    _dataset_args(p)
    _eval_args(p)
    _search_args(p)
    p.add_argument("--config", help="experiment config JSON; overrides the flags below")
    p.add_argument("--collect-epochs", type=int, default=300)
    p.add_argument("--codec-epochs", type=int, default=50)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--strategy", default="iid", choices=["iid", "dirichlet_label", "size_power_law"])
    p.add_argument("--param", type=float)
    p.add_argument("--calibration-interval", type=int, default=50)
    p.add_argument("--out", help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentfs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect subset/score records")
    _dataset_args(p)
    _eval_args(p)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--mode", default="rl", choices=["rl", "random"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="records.jsonl")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the set codec on records")
    p.add_argument("--records", required=True)
    p.add_argument("--universe", type=int, required=True, help="feature universe size")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--M", type=int, default=32)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--augment", type=int, default=25)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default="codec.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="policy search in the embedding space")
    _dataset_args(p)
    _eval_args(p)
    _search_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="search_report.json")
    p.set_defaults(func=cmd_search)

    for name, func, help_ in (("run", cmd_run, "centralized end-to-end run"),
                              ("federate", cmd_federate, "federated end-to-end run")):
        p = sub.add_parser(name, help=help_)
        _experiment_args(p)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="trade-off sweep over lambda")
    _experiment_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--values", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--mode", default="centralized", choices=["centralized", "federated"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild summary.json from a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
