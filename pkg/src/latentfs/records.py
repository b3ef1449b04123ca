"""Feature-selection records: storage, JSON-lines persistence, augmentation and seeding."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Performance


@dataclass(frozen=True)
class FeatureSubset:
    """Distinct feature IDs in presentation order.

    Equality and hashing use the sorted canonical form; ``ids`` keeps the token
    order so permutation augmentation has something to permute.
    """

    ids: tuple[int, ...]
    universe_size: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if not ids:
            raise ValueError("feature subset must be non-empty")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate feature ids in {ids}")
        if min(ids) < 0 or max(ids) >= self.universe_size:
            raise ValueError(f"feature ids must lie in [0, {self.universe_size})")

    @property
    def canonical(self) -> tuple[int, ...]:
        return tuple(sorted(self.ids))

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, FeatureSubset):
            return NotImplemented
        return self.universe_size == other.universe_size and self.canonical == other.canonical

    def __hash__(self):
        return hash((self.universe_size, self.canonical))

    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.universe_size, dtype=np.float32)
        v[list(self.ids)] = 1.0
        return v

    @classmethod
    def from_mask(cls, mask, universe_size: int | None = None) -> "FeatureSubset":
        mask = np.asarray(mask).astype(bool)
        return cls(tuple(np.flatnonzero(mask).tolist()), universe_size or len(mask))


@dataclass(frozen=True)
class SelectionRecord:
    subset: FeatureSubset
    performance: Performance
    client_id: int | None = None
    client_sample_count: int | None = None
    collected_at: float = field(default_factory=time.time)

    @property
    def perf(self) -> float:
        return self.performance.value

    def to_json(self) -> dict:
        # the upload wire format; collected_at and cv settings stay client-side
        return {
            "ids": list(self.subset.ids),
            "perf": float(self.performance.value),
            "metric": self.performance.metric_name,
            "client_id": self.client_id,
            "client_n": self.client_sample_count,
        }

    @classmethod
    def from_json(cls, obj: dict, universe_size: int, cv_folds: int = 5, seed: int = 0) -> "SelectionRecord":
        return cls(
            FeatureSubset(tuple(obj["ids"]), universe_size),
            Performance(obj["metric"], float(obj["perf"]), cv_folds, seed),
            obj.get("client_id"),
            obj.get("client_n"),
            collected_at=0.0,
        )


class RecordStore:
    """Append-only record sequence over one feature universe.

    With ``path`` set, every append is also written through to a JSON-lines
    file. Appends are serialized by a lock; readers get a snapshot prefix.
    """

    def __init__(self, universe_size: int, records=(), path=None):
        self.universe_size = int(universe_size)
        self._records: list[SelectionRecord] = []
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        for r in records:
            self.append(r)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self._records[i]

    @property
    def records(self) -> list[SelectionRecord]:
        return list(self._records)

    def append(self, record: SelectionRecord) -> "RecordStore":
        if record.subset.universe_size != self.universe_size:
            raise ValueError(
                f"universe mismatch: record has {record.subset.universe_size}, store has {self.universe_size}"
            )
        with self._lock:
            self._records.append(record)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record.to_json()) + "\n")
        return self

    def extend(self, records) -> "RecordStore":
        for r in records:
            self.append(r)
        return self

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_json()) + "\n" for r in self._records)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, universe_size: int) -> "RecordStore":
        store = cls(universe_size)
        for line in text.splitlines():
            if line.strip():
                store.append(SelectionRecord.from_json(json.loads(line), universe_size))
        return store

    @classmethod
    def load(cls, path, universe_size: int) -> "RecordStore":
        return cls.loads(Path(path).read_text(), universe_size)


def append_record(store: RecordStore, record: SelectionRecord) -> RecordStore:
    return store.append(record)


def augment_permutations(record: SelectionRecord, k: int = 25, seed: int = 0) -> list[SelectionRecord]:
    """``k`` copies of ``record`` with independently shuffled token order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    ids = np.asarray(record.subset.ids)
    out = []
    for _ in range(k):
        perm = tuple(rng.permutation(ids).tolist())
        out.append(SelectionRecord(
            FeatureSubset(perm, record.subset.universe_size), record.performance,
            record.client_id, record.client_sample_count, record.collected_at,
        ))
    return out


def top_k_records(store, k: int = 25) -> list[SelectionRecord]:
    """Best ``k`` records by performance; ties keep insertion order."""
    records = list(store)
    if not records:
        raise ValueError("cannot rank an empty record store")
    order = sorted(range(len(records)), key=lambda i: -records[i].perf)  # sorted() is stable
    return [records[i] for i in order[:k]]
