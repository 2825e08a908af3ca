"""Deterministic seed derivation.

Every random draw in the package comes from a generator derived functionally
from a master seed plus a path of stream labels, never from a shared
sequential generator.  Two runs that request the same path get bit-identical
streams, and independent paths never interact, which is what makes the
federated and protocol runners order-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash(label: str) -> int:
    """Platform-independent 64-bit hash of a string label."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_path(master_seed: int, *path: int | str) -> list[int]:
    """Entropy word list for ``master_seed`` plus a path of labels."""
    words = [int(master_seed) & _MASK64]
    for part in path:
        if isinstance(part, str):
            words.append(stable_hash(part))
        else:
            words.append(int(part) & _MASK64)
    return words


def rng_for(master_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for a (master seed, path) pair; same path, same stream."""
    return np.random.default_rng(seed_path(master_seed, *path))
