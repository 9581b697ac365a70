"""Deterministic sub-seed derivation.

Each consumer draws from ``SeedSequence([seed, crc32(name), *extra])`` so a new
consumer never shifts the stream of an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seeds must be non-negative, got {seed}")
    return np.random.SeedSequence([int(seed), stream_key(name), *[int(e) for e in extra]])


def derive_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, name, *extra)))


def derive_int(seed: int, name: str, *extra: int) -> int:
    """A 31-bit integer seed for APIs that want a plain int."""
    return int(derive_seed_sequence(seed, name, *extra).generate_state(1)[0] & 0x7FFFFFFF)
