"""Seed derivation.

Every random stream in the package comes from ``stream(seed, *keys)``. The keys
name the purpose (and channel, particle block, iteration...) so that streams
never depend on the order in which they are requested.
"""
from __future__ import annotations

import zlib

import numpy as np

from .errors import InvalidParameter

_MASK32 = 0xFFFFFFFF


def _key_words(key) -> list[int]:
    if isinstance(key, (bool, np.bool_)):
        return [int(key)]
    if isinstance(key, (int, np.integer)):
        key = int(key)
        if key < 0:
            raise InvalidParameter(f"stream keys must be nonnegative, got {key}")
        return [key & _MASK32, (key >> 32) & _MASK32]
    if isinstance(key, str):
        return [zlib.crc32(key.encode("utf-8")) & _MASK32, len(key)]
    raise InvalidParameter(f"unsupported stream key {key!r}")


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise InvalidParameter(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidParameter(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def stream(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator for (seed, keys)."""
    words = _key_words(check_seed(seed))
    for key in keys:
        words.extend(_key_words(key))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def child_seed(seed: int, *keys) -> int:
    """A derived 63-bit integer seed, for handing to APIs that take a seed."""
    return int(stream(seed, "child", *keys).integers(0, 2**63 - 1))
