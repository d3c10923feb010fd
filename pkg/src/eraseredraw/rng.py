"""Seed derivation.

Every random stream in the package is derived from one global seed by
mixing in stream keys with SplitMix64. The mixed 64-bit value seeds a
numpy ``Generator`` used for the bulk draws, so samples can be produced in
any order (or in parallel) with identical results.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    raise TypeError(f"unsupported stream key {key!r}")


def derive_seed(seed: int, *keys) -> int:
    """Hash ``seed`` and an ordered tuple of stream keys into a 64-bit seed."""
    state = int(seed) & MASK64
    state, out = splitmix64(state)
    for key in keys:
        state, out = splitmix64(state ^ out ^ _key_to_int(key))
    return out


def make_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
