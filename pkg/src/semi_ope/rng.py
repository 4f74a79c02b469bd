"""Keyed random streams.

Every random draw in the package comes from a stream addressed by
``(master_seed, tag, *coords)``. Streams are Philox generators seeded through
``SeedSequence``, so a task's draws never depend on which worker ran it or in
what order tasks were scheduled.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed: int, tag: str, *coords: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, coordinates) address."""
    key = [int(master_seed) & 0xFFFFFFFF, int(master_seed) >> 32, _tag_key(tag)]
    key.extend(int(c) for c in coords)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def slot_uniforms(seed: int, *index_arrays: np.ndarray) -> np.ndarray:
    """Uniform(0,1) values that are a pure function of ``(seed, *indices)``.

    Used for availability masks: the draw for slot (trajectory, t, action)
    does not depend on array shapes or on the other slots.
    """
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=np.int64) for a in index_arrays])
    with np.errstate(over="ignore"):
        h = _splitmix64(np.full(arrays[0].shape, np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)))
        for arr in arrays:
            h = _splitmix64(h ^ arr.astype(np.uint64))
    # top 53 bits -> [0, 1)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
