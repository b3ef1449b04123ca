"""Tabular datasets, client partitioning and downstream subset evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn import metrics as skm
from sklearn.base import BaseEstimator, clone
from sklearn.ensemble import (
    GradientBoostingClassifier,
    GradientBoostingRegressor,
    RandomForestClassifier,
    RandomForestRegressor,
)
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC, SVR
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

TASK_KINDS = ("binary", "multiclass", "regression")
MODEL_KINDS = ("tree_ensemble", "boosted_trees", "svm", "knn", "decision_tree")
PARTITION_STRATEGIES = ("iid", "dirichlet_label", "size_power_law")
PRIMARY_METRIC = {"binary": "f1", "multiclass": "micro_f1", "regression": "1-rae"}


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    target: np.ndarray
    task_kind: str
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.target = np.asarray(self.target)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.features.shape[0] != self.target.shape[0]:
            raise ValueError(
                f"row count mismatch: {self.features.shape[0]} feature rows vs {self.target.shape[0]} targets"
            )
        if self.features.shape[1] < 1:
            raise ValueError("dataset needs at least one feature")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}; expected one of {TASK_KINDS}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.task_kind == "regression":
            self.target = self.target.astype(np.float64)
        else:
            if not np.issubdtype(self.target.dtype, np.integer):
                as_int = self.target.astype(np.int64)
                if not np.array_equal(as_int, self.target):
                    raise ValueError("classification targets must be discrete labels")
                self.target = as_int
            if len(np.unique(self.target)) < 2:
                raise ValueError("classification target needs at least 2 classes")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.features.shape[1])]
        if len(self.feature_names) != self.features.shape[1]:
            raise ValueError("feature_names length must equal the feature count")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, rows, name: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        # bypass the >=2 class check: a client may legitimately hold one class
        sub = object.__new__(Dataset)
        sub.name = name or self.name
        sub.features = self.features[rows]
        sub.target = self.target[rows]
        sub.task_kind = self.task_kind
        sub.feature_names = list(self.feature_names)
        return sub


@dataclass
class ClientDataset:
    client_id: int
    data: Dataset
    sample_count: int = -1

    def __post_init__(self):
        if self.sample_count < 0:
            self.sample_count = self.data.n_samples
        if self.sample_count != self.data.n_samples:
            raise ValueError("sample_count must equal the client's row count")


@dataclass
class Performance:
    metric_name: str
    value: float
    cv_folds: int
    seed: int

    def to_json(self) -> dict:
        return {"metric": self.metric_name, "value": float(self.value), "folds": self.cv_folds, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "Performance":
        return cls(obj["metric"], float(obj["value"]), int(obj["folds"]), int(obj["seed"]))


# ---------------------------------------------------------------- loading

def load_dataset(path, target: str, task: str, name: str | None = None) -> Dataset:
    """Read a headered CSV into a validated :class:`Dataset`.

    Classification labels are encoded to ``0..k-1`` in lexical order of the raw
    label strings. Any non-numeric or missing feature cell is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise ValueError(f"{path} is empty") from exc
    if df.shape[0] == 0:
        raise ValueError(f"{path} has a header but no rows")
    if target not in df.columns:
        raise ValueError(f"target column not found: {target!r}")
    if task not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task!r}")

    feats = df.drop(columns=[target])
    bad = [c for c in feats.columns if not pd.api.types.is_numeric_dtype(feats[c])]
    if bad:
        raise ValueError(f"non-numeric feature cells in columns {bad[:5]}")
    if feats.isna().any().any():
        raise ValueError("missing feature cells are not supported")

    raw_y = df[target]
    if task == "regression":
        if not pd.api.types.is_numeric_dtype(raw_y):
            raise ValueError("regression target must be numeric")
        y = raw_y.to_numpy(dtype=np.float64)
    else:
        labels = raw_y.astype(str)
        classes = sorted(labels.unique())
        y = labels.map({c: i for i, c in enumerate(classes)}).to_numpy(dtype=np.int64)
    return Dataset(
        name=name or path.stem,
        features=feats.to_numpy(dtype=np.float64),
        target=y,
        task_kind=task,
        feature_names=[str(c) for c in feats.columns],
    )


def make_synthetic(n_samples=300, n_features=20, n_informative=5, task="binary", seed=0, name="synthetic"):
    """Synthetic benchmark whose informative features are columns ``0..n_informative-1``."""
    from sklearn.datasets import make_classification, make_regression

    if task == "regression":
        X, y = make_regression(
            n_samples=n_samples, n_features=n_features, n_informative=n_informative,
            noise=5.0, shuffle=False, random_state=seed,
        )
    else:
        n_classes = 2 if task == "binary" else 3
        X, y = make_classification(
            n_samples=n_samples, n_features=n_features, n_informative=n_informative,
            n_redundant=0, n_repeated=0, n_classes=n_classes, class_sep=1.5,
            shuffle=False, random_state=seed,
        )
    return Dataset(name, X, y, task)


# ---------------------------------------------------------------- partitioning

def partition_clients(dataset: Dataset, n_clients: int, strategy: str = "iid", param: float | None = None,
                      seed: int = 0) -> list[ClientDataset]:
    """Split ``dataset`` row-wise into disjoint, covering client shards.

    ``param`` is the Dirichlet concentration for ``dirichlet_label`` (default
    0.5) and the exponent for ``size_power_law`` (default 2.0); it is ignored
    for ``iid``.
    """
    n = dataset.n_samples
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > n:
        raise ValueError(f"n_clients={n_clients} exceeds sample count {n}")
    if strategy not in PARTITION_STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    if n_clients == 1:
        return [ClientDataset(0, dataset.take(np.arange(n), f"{dataset.name}/client0"))]

    rng = np.random.default_rng(seed)
    if strategy == "iid":
        shards = np.array_split(rng.permutation(n), n_clients)
    elif strategy == "size_power_law":
        shards = _power_law_shards(n, n_clients, 2.0 if param is None else param, rng)
    else:
        if dataset.task_kind == "regression":
            raise ValueError("dirichlet_label partitioning needs a classification target")
        shards = _dirichlet_shards(dataset.target, n_clients, 0.5 if param is None else param, rng)

    clients = []
    for cid, rows in enumerate(shards):
        if len(rows) == 0:
            raise ValueError(f"client {cid} received no samples (holds zero classes)")
        clients.append(ClientDataset(cid, dataset.take(np.sort(rows), f"{dataset.name}/client{cid}")))
    return clients


def _power_law_shards(n, n_clients, exponent, rng):
    weights = np.arange(1, n_clients + 1, dtype=np.float64) ** (-exponent)
    weights /= weights.sum()
    # every client keeps one row; the rest follow the power law
    extra = n - n_clients
    sizes = np.floor(weights * extra).astype(np.int64)
    remainder = extra - sizes.sum()
    order = np.argsort(-(weights * extra - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    sizes += 1
    perm = rng.permutation(n)
    return np.split(perm, np.cumsum(sizes)[:-1])


def _dirichlet_shards(y, n_clients, alpha, rng, max_tries=100):
    classes = np.unique(y)
    for _ in range(max_tries):
        shards = [[] for _ in range(n_clients)]
        for cls in classes:
            idx = rng.permutation(np.flatnonzero(y == cls))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for cid, part in enumerate(np.split(idx, cuts)):
                shards[cid].extend(part.tolist())
        if all(len(s) > 0 for s in shards):
            return [np.asarray(s, dtype=np.int64) for s in shards]
    raise ValueError(f"dirichlet_label(alpha={alpha}) left a client empty after {max_tries} draws")


# ---------------------------------------------------------------- metrics

def _check_pair(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty metric input")
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    return y_true, y_pred


def one_minus_rae(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    y_true = y_true.astype(np.float64)
    denom = np.abs(y_true - y_true.mean()).sum()
    if denom == 0:
        raise ValueError("1-RAE is undefined for a constant target")
    return float(1.0 - np.abs(y_true - y_pred).sum() / denom)


def _as_labels(task_kind, y_pred):
    y_pred = np.asarray(y_pred)
    if y_pred.ndim == 2:
        return y_pred.argmax(axis=1)
    if np.issubdtype(y_pred.dtype, np.floating) and not np.all(y_pred == np.round(y_pred)):
        if task_kind != "binary":
            raise ValueError("multiclass scores must be a (n, k) matrix")
        return (y_pred >= 0.5).astype(np.int64)
    return y_pred.astype(np.int64)


def compute_metric(task_kind: str, y_true, y_pred) -> float:
    """Primary metric: F1 (binary), micro-F1 (multiclass) or 1-RAE (regression)."""
    y_true, y_pred = _check_pair(y_true, y_pred)
    if task_kind == "regression":
        return one_minus_rae(y_true, y_pred)
    labels = _as_labels(task_kind, y_pred)
    if task_kind == "binary":
        return float(skm.f1_score(y_true, labels, pos_label=1, zero_division=0))
    if task_kind == "multiclass":
        return float(skm.f1_score(y_true, labels, average="micro", zero_division=0))
    raise ValueError(f"unknown task kind {task_kind!r}")


def metric_suite(task_kind: str, y_true, y_pred, y_score=None) -> dict[str, float]:
    """All reported metrics for one prediction vector.

    Multiclass precision/recall come in explicitly labelled micro and macro
    variants. ``roc_auc`` is only present for binary tasks when ``y_score``
    (positive-class probability) is given and both classes occur.
    """
    y_true, y_pred = _check_pair(y_true, y_pred)
    if task_kind == "regression":
        y_true = y_true.astype(np.float64)
        mse = float(np.mean((y_true - y_pred) ** 2))
        return {
            "1-rae": one_minus_rae(y_true, y_pred),
            "1-mae": 1.0 - float(np.mean(np.abs(y_true - y_pred))),
            "1-mse": 1.0 - mse,
            "1-rmse": 1.0 - float(np.sqrt(mse)),
        }
    labels = _as_labels(task_kind, y_pred)
    if task_kind == "binary":
        out = {
            "f1": float(skm.f1_score(y_true, labels, zero_division=0)),
            "precision": float(skm.precision_score(y_true, labels, zero_division=0)),
            "recall": float(skm.recall_score(y_true, labels, zero_division=0)),
        }
        if y_score is not None and len(np.unique(y_true)) == 2:
            out["roc_auc"] = float(skm.roc_auc_score(y_true, y_score))
        return out
    out = {}
    for avg in ("micro", "macro"):
        out[f"{avg}_f1"] = float(skm.f1_score(y_true, labels, average=avg, zero_division=0))
        out[f"{avg}_precision"] = float(skm.precision_score(y_true, labels, average=avg, zero_division=0))
        out[f"{avg}_recall"] = float(skm.recall_score(y_true, labels, average=avg, zero_division=0))
    return out


# ---------------------------------------------------------------- evaluation

def make_model(model_kind: str, task_kind: str, seed: int, n_estimators: int = 100) -> BaseEstimator:
    reg = task_kind == "regression"
    if model_kind == "tree_ensemble":
        cls = RandomForestRegressor if reg else RandomForestClassifier
        return cls(n_estimators=n_estimators, random_state=seed)
    if model_kind == "boosted_trees":
        cls = GradientBoostingRegressor if reg else GradientBoostingClassifier
        return cls(n_estimators=n_estimators, random_state=seed)
    if model_kind == "svm":
        return make_pipeline(StandardScaler(), SVR() if reg else SVC(probability=False, random_state=seed))
    if model_kind == "knn":
        return make_pipeline(StandardScaler(), KNeighborsRegressor() if reg else KNeighborsClassifier())
    if model_kind == "decision_tree":
        cls = DecisionTreeRegressor if reg else DecisionTreeClassifier
        return cls(random_state=seed)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")


def canonical_ids(subset, n_features: int | None = None) -> tuple[int, ...]:
    ids = getattr(subset, "ids", subset)
    ids = tuple(sorted({int(i) for i in ids}))
    if not ids:
        raise ValueError("empty feature subset")
    if ids[0] < 0 or (n_features is not None and ids[-1] >= n_features):
        raise ValueError(f"feature id out of range [0, {n_features})")
    return ids


def _folds(dataset: Dataset, cv_folds: int, seed: int):
    if dataset.n_samples < cv_folds:
        raise ValueError(f"{dataset.n_samples} samples cannot fill {cv_folds} folds")
    if dataset.task_kind == "regression":
        return KFold(cv_folds, shuffle=True, random_state=seed).split(dataset.features)
    _, counts = np.unique(dataset.target, return_counts=True)
    if counts.min() >= cv_folds:
        return StratifiedKFold(cv_folds, shuffle=True, random_state=seed).split(dataset.features, dataset.target)
    # small or label-skewed client shards: plain shuffled folds
    return KFold(cv_folds, shuffle=True, random_state=seed).split(dataset.features)


def _fit_predict(model, X_tr, y_tr, X_te, task_kind):
    classes = np.unique(y_tr)
    if task_kind != "regression" and len(classes) == 1:
        # degenerate fold: constant predictor
        return np.full(len(X_te), classes[0]), np.full(len(X_te), float(classes[0]))
    model.fit(X_tr, y_tr)
    pred = model.predict(X_te)
    score = None
    if task_kind == "binary" and hasattr(model, "predict_proba"):
        proba = model.predict_proba(X_te)
        score = proba[:, list(model.classes_).index(1)] if 1 in model.classes_ else np.zeros(len(X_te))
    return pred, score


def evaluate_subset(dataset: Dataset, subset, model_kind: str = "tree_ensemble", cv_folds: int = 5,
                    seed: int = 0, n_estimators: int = 100) -> Performance:
    """Cross-validated primary metric of ``model_kind`` trained on ``subset`` columns.

    Columns are taken in canonical (sorted) order so the result does not depend
    on how the subset's IDs are presented.
    """
    ids = canonical_ids(subset, dataset.n_features)
    X = dataset.features[:, ids]
    y = dataset.target
    base = make_model(model_kind, dataset.task_kind, seed, n_estimators)
    scores = []
    for tr, te in _folds(dataset, cv_folds, seed):
        pred, _ = _fit_predict(clone(base), X[tr], y[tr], X[te], dataset.task_kind)
        scores.append(compute_metric(dataset.task_kind, y[te], pred))
    return Performance(PRIMARY_METRIC[dataset.task_kind], float(np.mean(scores)), cv_folds, seed)


def evaluate_subset_metrics(dataset: Dataset, subset, model_kind: str = "tree_ensemble", cv_folds: int = 5,
                            seed: int = 0, n_estimators: int = 100) -> dict[str, float]:
    """Fold-averaged :func:`metric_suite` for ``subset``."""
    ids = canonical_ids(subset, dataset.n_features)
    X = dataset.features[:, ids]
    y = dataset.target
    base = make_model(model_kind, dataset.task_kind, seed, n_estimators)
    rows = []
    for tr, te in _folds(dataset, cv_folds, seed):
        pred, score = _fit_predict(clone(base), X[tr], y[tr], X[te], dataset.task_kind)
        rows.append(metric_suite(dataset.task_kind, y[te], pred, score))
    keys = set.intersection(*(set(r) for r in rows))
    return {k: float(np.mean([r[k] for r in rows])) for k in sorted(keys)}


class SubsetEvaluator:
    """Memoizing callable ``ids -> metric value`` bound to one dataset and model setup.

    Evaluation is deterministic, so caching on the canonical subset changes
    nothing but cost.
    """

    def __init__(self, dataset: Dataset, model_kind="tree_ensemble", cv_folds=5, seed=0, n_estimators=100):
        self.dataset = dataset
        self.model_kind = model_kind
        self.cv_folds = cv_folds
        self.seed = seed
        self.n_estimators = n_estimators
        self.cache: dict[tuple[int, ...], float] = {}
        self.calls = 0

    @property
    def n_features(self) -> int:
        return self.dataset.n_features

    def performance(self, subset) -> Performance:
        return Performance(PRIMARY_METRIC[self.dataset.task_kind], self(subset), self.cv_folds, self.seed)

    def __call__(self, subset) -> float:
        key = canonical_ids(subset, self.dataset.n_features)
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = evaluate_subset(
                self.dataset, key, self.model_kind, self.cv_folds, self.seed, self.n_estimators
            ).value
        return self.cache[key]


def dump_performance(perf: Performance) -> str:
    return json.dumps(perf.to_json())


def subset_mask(ids: Iterable[int], n_features: int) -> np.ndarray:
    mask = np.zeros(n_features, dtype=np.float64)
    mask[list(ids)] = 1.0
    return mask


def feature_columns(dataset: Dataset, ids: Sequence[int]) -> list[str]:
    return [dataset.feature_names[i] for i in canonical_ids(ids, dataset.n_features)]
