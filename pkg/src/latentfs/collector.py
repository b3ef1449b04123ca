"""Record collection: explore subsets of one dataset and log their downstream scores.

The RL collector keeps one Bernoulli "keep this feature" agent per feature and
trains all of them with a shared score-function gradient. It is deliberately a
lightweight stand-in; anything producing a :class:`RecordStore` can replace it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PRIMARY_METRIC, Performance, SubsetEvaluator
from .records import FeatureSubset, RecordStore, SelectionRecord


@dataclass
class CollectorPolicy:
    probs: np.ndarray
    learning_rate: float = 2.0
    epsilon: float = 0.05
    baseline_decay: float = 0.9
    baseline: float | None = field(default=None)

    @classmethod
    def uniform(cls, n_features: int, **kwargs) -> "CollectorPolicy":
        return cls(np.full(n_features, 0.5), **kwargs)

    def __post_init__(self):
        self.probs = np.clip(np.asarray(self.probs, dtype=np.float64), self.epsilon, 1 - self.epsilon)

    def sample(self, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
        for _ in range(max_tries):
            mask = rng.random(len(self.probs)) < self.probs
            if mask.any():
                return mask
        raise RuntimeError("policy keeps sampling empty subsets")

    def update(self, mask: np.ndarray, reward: float) -> float:
        """One REINFORCE step on the logits; returns the advantage used."""
        if self.baseline is None:
            self.baseline = reward
        advantage = reward - self.baseline
        logits = np.log(self.probs) - np.log1p(-self.probs)
        # d/dlogit log Bernoulli(mask | sigmoid(logit)) = mask - p
        logits += self.learning_rate * advantage * (mask.astype(np.float64) - self.probs)
        self.probs = np.clip(1.0 / (1.0 + np.exp(-logits)), self.epsilon, 1 - self.epsilon)
        self.baseline = self.baseline_decay * self.baseline + (1 - self.baseline_decay) * reward
        return advantage


@dataclass
class CollectorConfig:
    mode: str = "rl"
    epochs: int = 300
    learning_rate: float = 2.0
    epsilon: float = 0.05
    baseline_decay: float = 0.9
    min_size: int = 1
    max_size: int | None = None
    model_kind: str = "tree_ensemble"
    cv_folds: int = 5
    eval_seed: int = 0
    n_estimators: int = 100

    def __post_init__(self):
        if self.mode not in ("rl", "random"):
            raise ValueError(f"unknown collector mode {self.mode!r}")


def run_collector(dataset, config: CollectorConfig, evaluator=None, seed: int = 0, client_id=None,
                  client_n=None) -> RecordStore:
    """Dispatch on ``config.mode``; ``epochs`` doubles as the record count for random mode."""
    evaluator = evaluator or SubsetEvaluator(dataset, config.model_kind, config.cv_folds, config.eval_seed,
                                             config.n_estimators)
    if config.mode == "random":
        return collect_random(dataset, config.epochs, config.min_size, config.max_size, evaluator, seed,
                              client_id, client_n)
    policy = CollectorPolicy.uniform(dataset.n_features, learning_rate=config.learning_rate,
                                     epsilon=config.epsilon, baseline_decay=config.baseline_decay)
    return collect_records(dataset, config.epochs, policy, evaluator, seed, client_id, client_n)


def _metric_name(evaluator) -> str:
    ds = getattr(evaluator, "dataset", None)
    return PRIMARY_METRIC[ds.task_kind] if ds is not None else "score"


def _record(ids, value, evaluator, n_features, client_id, client_n):
    perf = Performance(_metric_name(evaluator), float(value),
                       getattr(evaluator, "cv_folds", 0), getattr(evaluator, "seed", 0))
    return SelectionRecord(FeatureSubset(tuple(ids), n_features), perf, client_id, client_n)


def collect_records(dataset, epochs: int = 300, policy: CollectorPolicy | None = None, evaluator=None,
                    seed: int = 0, client_id=None, client_n=None, history=None) -> RecordStore:
    """Run the RL collector for ``epochs`` steps, one evaluated record per step.

    ``evaluator`` maps a list of feature IDs to a score and defaults to a
    random-forest :class:`SubsetEvaluator`. If ``history`` is a list, the
    policy's probability vector is appended to it after every update.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = dataset.n_features
    policy = policy or CollectorPolicy.uniform(n)
    evaluator = evaluator or SubsetEvaluator(dataset, seed=seed)
    rng = np.random.default_rng(seed)
    store = RecordStore(n)
    for epoch in range(epochs):
        mask = policy.sample(rng)
        ids = np.flatnonzero(mask).tolist()
        try:
            value = evaluator(ids)
        except Exception as exc:
            raise RuntimeError(f"evaluator failed at collection epoch {epoch}: {exc}") from exc
        policy.update(mask, value)
        if history is not None:
            history.append(policy.probs.copy())
        store.append(_record(ids, value, evaluator, n, client_id, client_n))
    return store


def collect_random(dataset, count: int, min_size: int = 1, max_size: int | None = None, evaluator=None,
                   seed: int = 0, client_id=None, client_n=None) -> RecordStore:
    """``count`` uniformly drawn subsets with size uniform in ``[min_size, max_size]``."""
    n = dataset.n_features
    max_size = n if max_size is None else max_size
    if not 1 <= min_size <= max_size <= n:
        raise ValueError(f"need 1 <= min_size <= max_size <= {n}, got [{min_size}, {max_size}]")
    evaluator = evaluator or SubsetEvaluator(dataset, seed=seed)
    rng = np.random.default_rng(seed)
    store = RecordStore(n)
    for i in range(count):
        size = int(rng.integers(min_size, max_size + 1))
        ids = rng.choice(n, size=size, replace=False).tolist()
        try:
            value = evaluator(ids)
        except Exception as exc:
            raise RuntimeError(f"evaluator failed at collection epoch {i}: {exc}") from exc
        store.append(_record(ids, value, evaluator, n, client_id, client_n))
    return store
