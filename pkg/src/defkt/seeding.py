"""Deterministic RNG stream derivation.

Every random decision in a run is drawn from a stream derived from the
master seed plus context keys (round index, client id, purpose tag), so
trajectories do not depend on execution order or parallel scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _entropy(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("ascii"))
    return int(key) & _MASK64


def seed_sequence(*keys: int | str) -> np.random.SeedSequence:
    """Build a SeedSequence from a tuple of integer or string keys."""
    if not keys:
        raise ValueError("at least one key is required")
    return np.random.SeedSequence([_entropy(k) for k in keys])


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Generator seeded by the key tuple; same keys always give the same stream."""
    return np.random.default_rng(seed_sequence(*keys))


def derive_seed(*keys: int | str) -> int:
    """Collapse a key tuple to a single integer seed for APIs that take one."""
    return int(seed_sequence(*keys).generate_state(1, np.uint64)[0])
