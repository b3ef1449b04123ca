"""Experiment configs, end-to-end runs, sweeps and reports."""
from __future__ import annotations

import json
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .codec import CodecConfig, export_embeddings, save_checkpoint, train_codec
from .collector import CollectorConfig, run_collector
from .data import (
    Dataset, SubsetEvaluator, evaluate_subset_metrics, load_dataset, make_model, make_synthetic,
    partition_clients,
)
from .federation import Federation, FederationConfig, audit_messages, federated_search
from .records import RecordStore
from .search import SearchConfig, search
from .seeding import derive_seed


@dataclass
class DatasetSpec:
    path: str | None = None
    target: str | None = None
    task: str = "binary"
    name: str | None = None
    synthetic: dict | None = None

    def load(self) -> Dataset:
        if self.path:
            return load_dataset(self.path, self.target, self.task, self.name)
        params = dict(self.synthetic or {})
        params.setdefault("task", self.task)
        return make_synthetic(**params, name=self.name or "synthetic")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mode: str = "centralized"
    collector: CollectorConfig = field(default_factory=CollectorConfig)
    codec: dict = field(default_factory=dict)
    search: SearchConfig = field(default_factory=SearchConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in ("centralized", "federated"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sections = {"dataset": DatasetSpec, "collector": CollectorConfig, "search": SearchConfig,
                    "federation": FederationConfig}
        for key, typ in sections.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def codec_config(self, universe_size: int) -> CodecConfig:
        return CodecConfig(universe_size=universe_size, **self.codec)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _stage(name, outdir, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        (outdir / "error.json").write_text(json.dumps({"stage": name, "error": repr(exc),
                                                       "traceback": traceback.format_exc()}, indent=2))
        raise StageError(name, exc) from exc


def size_report(original_size: int, selected_size: int) -> float:
    if original_size < 1:
        raise ValueError("original feature set size must be >= 1")
    if not 1 <= selected_size <= original_size:
        raise ValueError("selected size must lie in [1, original_size]")
    return selected_size / original_size


def importance_report(dataset: Dataset, subset, model_kind: str = "tree_ensemble", top_n: int = 7, seed: int = 0,
                      n_estimators: int = 100) -> list[tuple[str, float]]:
    """Impurity-based importances of the model fit on ``subset``, highest first."""
    if model_kind in ("svm", "knn"):
        raise ValueError(f"{model_kind} has no native importances; use sklearn.inspection.permutation_importance")
    ids = sorted(set(getattr(subset, "ids", subset)))
    model = make_model(model_kind, dataset.task_kind, seed, n_estimators)
    model.fit(dataset.features[:, ids], dataset.target)
    imp = np.asarray(model.feature_importances_, dtype=np.float64)
    order = sorted(range(len(ids)), key=lambda i: (-imp[i], ids[i]))
    return [(dataset.feature_names[ids[i]], float(imp[i])) for i in order[:top_n]]


# ---------------------------------------------------------------- runs

def _evaluator(ds, cfg: ExperimentConfig):
    c = cfg.collector
    return SubsetEvaluator(ds, c.model_kind, c.cv_folds, c.eval_seed, c.n_estimators)


def _suite(ds, ids, cfg):
    c = cfg.collector
    return evaluate_subset_metrics(ds, ids, c.model_kind, c.cv_folds, c.eval_seed, c.n_estimators)


def run_experiment(config: ExperimentConfig, log=None) -> dict:
    """Run every stage and write the run directory; returns the summary."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    ds = _stage("load", out, config.dataset.load)
    codec_cfg = _stage("configure", out, config.codec_config, ds.n_features)
    if config.mode == "centralized":
        store = _stage("collect", out, run_collector, ds, config.collector, _evaluator(ds, config),
                       derive_seed(config.seed, "collect", 0))
        store.save(out / "records.jsonl")
        codec, losses = _stage("train", out, train_codec, store, codec_cfg, derive_seed(config.seed, "codec"))
        save_checkpoint(codec, out / "codec.pt")
        best, report = _stage("search", out, search, codec, store, _evaluator(ds, config), config.search,
                              derive_seed(config.seed, "search"), log=log)
        report["codec_losses"] = losses
    else:
        fc = config.federation
        clients = _stage("partition", out, partition_clients, ds, fc.n_clients, fc.strategy, fc.param,
                         derive_seed(config.seed, "partition"))
        c = config.collector
        fed = Federation(clients, c.model_kind, c.cv_folds, c.eval_seed, c.n_estimators)
        try:
            best, report, codec = _stage(
                "federate", out, federated_search, fed, codec_cfg, config.search, config.collector, config.seed,
                fc.calibration_interval, fc.calibration_batch, fc.surrogate_steps, log)
        finally:
            fed.server_store.save(out / "records.jsonl")
            fed.ledger.dump_jsonl(out / "ledger.jsonl")
        save_checkpoint(codec, out / "codec.pt")
        store = fed.server_store
        report["privacy_violations"] = audit_messages(fed.ledger)
        report["clients"] = [{"client_id": cl.client_id, "n": cl.sample_count} for cl in clients]

    full = list(range(ds.n_features))
    report["dataset"] = {"name": ds.name, "n_samples": ds.n_samples, "n_features": ds.n_features,
                         "task": ds.task_kind}
    report["metrics_selected"] = _stage("report", out, _suite, ds, best.canonical, config)
    report["metrics_full"] = _suite(ds, full, config)
    report["importances"] = _importances(ds, best.canonical, config)
    (out / "search_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    export_embeddings(codec, RecordStore(store.universe_size, _distinct(store)), out / "embeddings.jsonl")
    return write_summary(out)


def _distinct(store):
    seen, out = set(), []
    for r in store:
        if r.subset.canonical not in seen:
            seen.add(r.subset.canonical)
            out.append(r)
    return out


def _importances(ds, ids, cfg):
    c = cfg.collector
    try:
        return importance_report(ds, ids, c.model_kind, 7, c.eval_seed, c.n_estimators)
    except ValueError:
        return []


def summarize(config: dict, report: dict) -> dict:
    """Summary table derived only from persisted artifacts."""
    n = report["dataset"]["n_features"]
    best = report["best_subset"]
    summary = {
        "mode": config["mode"],
        "dataset": report["dataset"]["name"],
        "seed": config["seed"],
        "metric": _primary(report["dataset"]["task"]),
        "best_subset": best,
        "n_selected": len(best),
        "n_features": n,
        "size_ratio": size_report(n, len(best)),
        "best_perf": report["best_perf"],
        "metrics_selected": report["metrics_selected"],
        "metrics_full": report["metrics_full"],
        "top_features": report.get("importances", []),
    }
    if config["mode"] == "federated":
        summary.update({
            "local": report["local"],
            "local_mean": report["local_mean"],
            "local_std": report["local_std"],
            "global": report["global"],
            "full_set_global": report["full_set_global"],
            "weights": report["weights"],
            "ledger": report["ledger"],
            "privacy_violations": len(report["privacy_violations"]),
        })
    return summary


def _primary(task):
    from .data import PRIMARY_METRIC
    return PRIMARY_METRIC[task]


def write_summary(run_dir) -> dict:
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    report = json.loads((run_dir / "search_report.json").read_text())
    summary = summarize(config, report)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def format_summary(summary: dict) -> str:
    lines = [f"{summary['dataset']} ({summary['mode']}, seed {summary['seed']})",
             f"selected {summary['n_selected']}/{summary['n_features']} features "
             f"(ratio {summary['size_ratio']:.3f}): {summary['best_subset']}"]
    lines.append(f"{'metric':<16}{'selected':>10}{'full':>10}")
    for k, v in summary["metrics_selected"].items():
        lines.append(f"{k:<16}{v:>10.4f}{summary['metrics_full'].get(k, float('nan')):>10.4f}")
    if summary["mode"] == "federated":
        lines.append(f"local {summary['local_mean']:.4f} +- {summary['local_std']:.4f}   "
                     f"global {summary['global']:.4f}   (full set global {summary['full_set_global']:.4f})")
    return "\n".join(lines)


def sweep_lambda(config: ExperimentConfig, values, log=None) -> list[dict]:
    """One run per trade-off value; a failing cell is recorded and the sweep goes on."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one lambda value")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"lambda {v} outside [0, 1]")
    base = Path(config.output_dir)
    rows = []
    for v in values:
        run = replace(config, search=replace(config.search, lam=v), output_dir=str(base / f"lambda_{v:g}"))
        row = {"lambda": v, "default": v == SearchConfig().lam}
        try:
            summary = run_experiment(run, log=log)
            m = summary["metrics_selected"]
            row.update({k: m.get(k) for k in ("precision", "recall", "f1")} if "f1" in m else m)
            row["n_selected"] = summary["n_selected"]
        except Exception as exc:
            row["error"] = str(exc)
        rows.append(row)
    base.mkdir(parents=True, exist_ok=True)
    (base / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows
