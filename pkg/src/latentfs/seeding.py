"""Deterministic fan-out of one global seed into per-stage sub-seeds."""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    """Return a 32-bit sub-seed addressed by ``keys`` under ``seed``.

    Uses ``SeedSequence`` spawn keys, so ``derive_seed(s, "collect", 0)`` and
    ``derive_seed(s, "collect", 1)`` are independent streams and the mapping is
    stable across processes and platforms.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
