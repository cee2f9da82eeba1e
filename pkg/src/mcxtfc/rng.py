"""Counter-based random streams.

Every stream is a Philox4x64 generator whose key is derived from
``(base_seed, purpose, *indices)`` through :class:`numpy.random.SeedSequence`.
Streams with different purposes or indices are statistically independent and
do not depend on the order in which they are created, so a Monte-Carlo
replicate draws the same numbers whether it runs first, last or in another
process.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("basis", "noise", "ic", "sampling", "misc")


def _purpose_id(purpose: str) -> int:
    # crc32 keeps the mapping stable across interpreter runs (hash() is salted)
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``purpose`` and integer ``indices``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (_purpose_id(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn_key)
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, purpose: str, *indices: int) -> int:
    """A 63-bit integer seed drawn from the given stream."""
    return int(stream(seed, purpose, *indices).integers(0, 2**63 - 1))
