"""Simulated federated feature selection over record exchange.

Clients never ship rows. They upload (subset, score) records, and later answer
broadcast subsets with one scalar score each. The server trains the codec on the
pooled records, searches, and ranks candidates by sample-weighted global score.
Between client round-trips, rollout rewards come from a surrogate regressor that
each round-trip recalibrates.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch
from torch import nn

from .codec import CodecConfig, train_codec
from .collector import CollectorConfig, run_collector
from .data import PRIMARY_METRIC, ClientDataset, Performance, SubsetEvaluator, canonical_ids
from .records import RecordStore, SelectionRecord, top_k_records
from .search import SearchConfig, search
from .seeding import derive_seed

SCHEMA_DIR = Path(__file__).with_name("schemas")


def load_schema(name: str) -> dict:
    return json.loads((SCHEMA_DIR / f"{name}.json").read_text())


SERVER_BOUND = ("records_v1", "evaluations_v1")


# ---------------------------------------------------------------- weighting

def client_weights(sample_counts) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("need at least one client")
    if (counts <= 0).any():
        raise ValueError("sample counts must be positive")
    return counts / counts.sum()


def weighted_global_performance(weights, perfs) -> float:
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(perfs, dtype=np.float64)
    if w.shape != v.shape:
        raise ValueError(f"length mismatch: {w.shape} weights vs {v.shape} scores")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValueError("weights must be non-negative and sum to 1")
    return float(w @ v)


# ---------------------------------------------------------------- ledger

@dataclass
class CommunicationLedger:
    entries: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    records_uploaded: int = 0
    subsets_broadcast: int = 0
    evaluations_returned: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    round: int = 0

    def log(self, direction: str, schema: str, payload: dict, count: int) -> str:
        text = json.dumps(payload, sort_keys=True)
        size = len(text.encode("utf-8"))
        if direction == "up":
            self.bytes_up += size
        else:
            self.bytes_down += size
        if schema == "records_v1":
            self.records_uploaded += count
        elif schema == "broadcast_v1":
            self.subsets_broadcast += count
        elif schema == "evaluations_v1":
            self.evaluations_returned += count
        self.messages.append((direction, schema, text))
        self.entries.append({
            "round": self.round, "direction": direction, "schema": schema, "count": count, "bytes": size,
            "records_uploaded": self.records_uploaded, "subsets_broadcast": self.subsets_broadcast,
            "evaluations_returned": self.evaluations_returned, "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
        })
        return text

    def totals(self) -> dict:
        return {k: getattr(self, k) for k in
                ("records_uploaded", "subsets_broadcast", "evaluations_returned", "bytes_up", "bytes_down", "round")}

    def dump_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(e) + "\n" for e in self.entries))


def audit_messages(ledger: CommunicationLedger) -> list[str]:
    """Validate every server-bound message; return a list of violations (empty when clean)."""
    schemas = {name: load_schema(name) for name in SERVER_BOUND}
    problems = []
    for i, (direction, schema, text) in enumerate(ledger.messages):
        if direction != "up":
            continue
        if schema not in schemas:
            problems.append(f"message {i}: server-bound schema {schema!r} is not allowed")
            continue
        try:
            jsonschema.validate(json.loads(text), schemas[schema])
        except jsonschema.ValidationError as exc:
            problems.append(f"message {i} ({schema}): {exc.message}")
    return problems


# ---------------------------------------------------------------- federation

class Federation:
    def __init__(self, clients: list[ClientDataset], model_kind="tree_ensemble", cv_folds=5, eval_seed=0,
                 n_estimators=100):
        if not clients:
            raise ValueError("a federation needs at least one client")
        first = clients[0].data
        for c in clients[1:]:
            if (c.data.n_features != first.n_features or c.data.feature_names != first.feature_names
                    or c.data.task_kind != first.task_kind):
                raise ValueError(f"client {c.client_id} does not share the federation's feature schema")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        self.clients = clients
        self.universe_size = first.n_features
        self.task_kind = first.task_kind
        self.weights = client_weights([c.sample_count for c in clients])
        self.ledger = CommunicationLedger()
        self.server_store = RecordStore(self.universe_size)
        self.model_kind, self.cv_folds, self.eval_seed, self.n_estimators = model_kind, cv_folds, eval_seed, n_estimators
        self._evaluators = [SubsetEvaluator(c.data, model_kind, cv_folds, eval_seed, n_estimators) for c in clients]
        self.global_cache: dict[tuple[int, ...], float] = {}
        self.local_cache: dict[tuple[int, ...], list[float]] = {}

    @property
    def metric(self) -> str:
        return PRIMARY_METRIC[self.task_kind]

    def client_evaluator(self, idx: int) -> SubsetEvaluator:
        return self._evaluators[idx]

    def global_performance(self, subsets) -> list[float]:
        """Weighted global score per subset, broadcasting only the unseen ones."""
        keys = [canonical_ids(s, self.universe_size) for s in subsets]
        fresh = list(dict.fromkeys(k for k in keys if k not in self.global_cache))
        if fresh:
            broadcast_evaluate(fresh, self)
        return [self.global_cache[k] for k in keys]

    def __call__(self, subset) -> float:
        return self.global_performance([subset])[0]

    @property
    def cache(self):
        return self.global_cache


def upload_records(client: ClientDataset, collector_config: "CollectorConfig", seed: int = 0,
                   federation: Federation | None = None) -> list[SelectionRecord]:
    """Collect on the client's own rows and ship the records (and nothing else) to the server."""
    if client.sample_count < 1:
        raise ValueError("client holds no samples")
    if federation is not None:
        idx = [c.client_id for c in federation.clients].index(client.client_id)
        evaluator = federation.client_evaluator(idx)
    else:
        evaluator = SubsetEvaluator(client.data, collector_config.model_kind, collector_config.cv_folds,
                                    collector_config.eval_seed, collector_config.n_estimators)
    store = run_collector(client.data, collector_config, evaluator, seed,
                          client_id=client.client_id, client_n=client.sample_count)
    records = store.records
    message = {
        "schema": "records_v1", "client_id": client.client_id, "client_n": client.sample_count,
        "records": [r.to_json() for r in records],
    }
    if federation is not None:
        federation.ledger.log("up", "records_v1", message, len(records))
        federation.server_store.extend(records)
    return records


def broadcast_evaluate(subsets, federation: Federation, model_kind: str | None = None, seed: int | None = None):
    """Send subsets to every client and collect a ``len(subsets) x n_clients`` score matrix.

    Opens one ledger round: a broadcast message per client, then one evaluation
    message back per client. ``model_kind``/``seed`` default to the
    federation's evaluation settings.
    """
    if model_kind not in (None, federation.model_kind) or seed not in (None, federation.eval_seed):
        evaluators = [SubsetEvaluator(c.data, model_kind or federation.model_kind, federation.cv_folds,
                                      federation.eval_seed if seed is None else seed, federation.n_estimators)
                      for c in federation.clients]
    else:
        evaluators = federation._evaluators
    keys = [canonical_ids(s, federation.universe_size) for s in subsets]
    if not keys:
        return []
    ledger = federation.ledger
    ledger.round += 1
    down = {"schema": "broadcast_v1", "round": ledger.round, "subsets": [list(k) for k in keys],
            "model_kind": evaluators[0].model_kind, "cv_folds": federation.cv_folds, "seed": evaluators[0].seed}
    matrix = [[None] * len(federation.clients) for _ in keys]
    for j, (client, ev) in enumerate(zip(federation.clients, evaluators)):
        ledger.log("down", "broadcast_v1", down, len(keys))
        scores = [ev(k) for k in keys]
        ledger.log("up", "evaluations_v1", {
            "schema": "evaluations_v1", "round": ledger.round, "client_id": client.client_id,
            "client_n": client.sample_count, "metric": federation.metric, "perfs": scores,
        }, len(keys))
        for i, v in enumerate(scores):
            matrix[i][j] = Performance(federation.metric, v, ev.cv_folds, ev.seed)
    if evaluators is federation._evaluators:
        for k, row in zip(keys, matrix):
            local = [p.value for p in row]
            federation.local_cache[k] = local
            federation.global_cache[k] = weighted_global_performance(federation.weights, local)
    return matrix


# ---------------------------------------------------------------- surrogate

class CriticSurrogate:
    """Regressor from subset membership to weighted global score.

    Calibration fits it to every ground-truth score seen so far.
    """

    def __init__(self, universe_size: int, calibration_interval: int = 50, hidden: int = 64, lr: float = 1e-2,
                 steps: int = 100, seed: int = 0):
        if calibration_interval < 1:
            raise ValueError("calibration_interval must be >= 1")
        self.universe_size = universe_size
        self.calibration_interval = calibration_interval
        self.steps = steps
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(nn.Linear(universe_size, hidden), nn.Tanh(), nn.Linear(hidden, 1))
        self.opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        self.X: list[np.ndarray] = []
        self.y: list[float] = []
        self.last_calibration_error = math.nan

    def _features(self, subsets):
        X = np.zeros((len(subsets), self.universe_size), dtype=np.float32)
        for i, s in enumerate(subsets):
            X[i, list(canonical_ids(s, self.universe_size))] = 1.0
        return torch.from_numpy(X)

    def predict(self, subsets) -> np.ndarray:
        with torch.no_grad():
            return self.net(self._features(subsets)).squeeze(-1).double().numpy()


def calibrate_critic(surrogate: CriticSurrogate, candidates, true_global_rewards) -> CriticSurrogate:
    """Regress the surrogate onto ground-truth scores (history included)."""
    if len(candidates) == 0:
        raise ValueError("empty calibration batch")
    if len(candidates) != len(true_global_rewards):
        raise ValueError("candidates and rewards must align")
    X_new = surrogate._features(candidates)
    y_new = torch.tensor(np.asarray(true_global_rewards, dtype=np.float32))
    surrogate.X.extend(X_new.numpy())
    surrogate.y.extend(y_new.tolist())
    X = torch.from_numpy(np.stack(surrogate.X))
    y = torch.tensor(surrogate.y, dtype=torch.float32)
    for _ in range(surrogate.steps):
        loss = ((surrogate.net(X).squeeze(-1) - y) ** 2).mean()
        surrogate.opt.zero_grad()
        loss.backward()
        surrogate.opt.step()
    with torch.no_grad():
        surrogate.last_calibration_error = float(((surrogate.net(X_new).squeeze(-1) - y_new) ** 2).mean())
    return surrogate


class CalibratedScorer:
    """In-rollout scorer answering from the surrogate between client round-trips.

    Every ``calibration_interval``-th query to an unseen subset triggers one
    broadcast round covering that subset plus up to ``calibration_batch - 1``
    recent surrogate-scored subsets; the surrogate is then recalibrated.
    Subsets with known ground truth are always answered exactly.
    """

    def __init__(self, federation: Federation, surrogate: CriticSurrogate, calibration_batch: int = 4):
        self.federation = federation
        self.surrogate = surrogate
        self.calibration_batch = calibration_batch
        self.pending: list[tuple[int, ...]] = []
        self.queries = 0
        self.calibrations = 0

    @property
    def known(self):
        return self.federation.global_cache

    def ground(self, keys) -> list[float]:
        keys = list(dict.fromkeys(keys))
        values = self.federation.global_performance(keys)
        calibrate_critic(self.surrogate, keys, values)
        self.calibrations += 1
        return values

    def __call__(self, subset) -> float:
        key = canonical_ids(subset, self.federation.universe_size)
        if key in self.known:
            return self.known[key]
        self.queries += 1
        if self.queries % self.surrogate.calibration_interval == 0:
            extra = [k for k in self.pending if k not in self.known][-(self.calibration_batch - 1):] \
                if self.calibration_batch > 1 else []
            self.pending.clear()
            self.ground(extra + [key])
            return self.known[key]
        self.pending.append(key)
        return float(self.surrogate.predict([key])[0])


# ---------------------------------------------------------------- pipeline

@dataclass
class FederationConfig:
    n_clients: int = 3
    strategy: str = "iid"
    param: float | None = None
    calibration_interval: int | None = 50
    calibration_batch: int = 4
    surrogate_steps: int = 100


def federated_search(federation: Federation, codec_config: CodecConfig, search_config: SearchConfig,
                     collector_config: CollectorConfig, seed: int = 0, calibration_interval: int | None = 50,
                     calibration_batch: int = 4, surrogate_steps: int = 100, log=None):
    """Full protocol: client collection, server codec training, surrogate-assisted search.

    ``calibration_interval=None`` disables the surrogate so every reward is a
    true client round-trip. Returns ``(best_subset, report)`` where the report
    carries the per-client local scores of the winner, their weighted global
    score, the full-feature baseline and ledger totals.
    """
    for client in federation.clients:
        upload_records(client, collector_config, derive_seed(seed, "collect", client.client_id), federation)
        if log:
            log(f"client {client.client_id}: uploaded {collector_config.epochs} records")
    store = federation.server_store
    if len(store) == 0:
        raise ValueError("empty candidate pool: no records were uploaded")
    codec, losses = train_codec(store, codec_config, derive_seed(seed, "codec"))
    if log:
        log(f"codec trained: final loss {losses[-1]:.4f}")

    scorer = None
    if calibration_interval is not None:
        surrogate = CriticSurrogate(federation.universe_size, calibration_interval, steps=surrogate_steps,
                                    seed=derive_seed(seed, "surrogate"))
        scorer = CalibratedScorer(federation, surrogate, calibration_batch)
        scorer.ground([r.subset.ids for r in top_k_records(store, search_config.n_seeds)])
    best, report = search(codec, store, federation, search_config, derive_seed(seed, "search"), scorer=scorer,
                          log=log)
    if scorer is not None:
        report["calibrations"] = scorer.calibrations
        report["last_calibration_error"] = scorer.surrogate.last_calibration_error

    full = tuple(range(federation.universe_size))
    federation.global_performance([best.canonical, full])
    local = federation.local_cache[best.canonical]
    report.update({
        "metric": federation.metric,
        "weights": federation.weights.tolist(),
        "local": local,
        "local_mean": float(np.mean(local)),
        "local_std": float(np.std(local)),
        "global": federation.global_cache[best.canonical],
        "full_set_global": federation.global_cache[full],
        "full_set_local": federation.local_cache[full],
        "codec_losses": losses,
        "ledger": federation.ledger.totals(),
    })
    return best, report, codec


def centralized_search(dataset, codec_config: CodecConfig, search_config: SearchConfig,
                       collector_config: CollectorConfig, seed: int = 0, log=None):
    """Single-site pipeline using the same sub-seeds as client 0 of a federation."""
    evaluator = SubsetEvaluator(dataset, collector_config.model_kind, collector_config.cv_folds,
                                collector_config.eval_seed, collector_config.n_estimators)
    store = run_collector(dataset, collector_config, evaluator, derive_seed(seed, "collect", 0))
    codec, losses = train_codec(store, codec_config, derive_seed(seed, "codec"))
    if log:
        log(f"codec trained: final loss {losses[-1]:.4f}")
    search_eval = SubsetEvaluator(dataset, collector_config.model_kind, collector_config.cv_folds,
                                  collector_config.eval_seed, collector_config.n_estimators)
    best, report = search(codec, store, search_eval, search_config, derive_seed(seed, "search"), log=log)
    report["full_set_perf"] = search_eval(tuple(range(dataset.n_features)))
    report["codec_losses"] = losses
    return best, report, codec, store
