"""Deterministic RNG stream derivation.

Every stochastic component derives its generator from a master seed plus a
purpose key (and indices such as epoch / batch / restart), so streams are
independent of each other and of how many draws any other component makes.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, bool):
        raise TypeError("bool is not a valid stream key")
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream key must be int or str, got {type(key).__name__}")


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *keys)."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(entropy)
