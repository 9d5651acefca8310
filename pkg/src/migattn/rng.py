"""Seed splitting: every consumer gets its own named, independent stream."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *counter: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, name, *counter)``.

    Streams never share state, so adding a consumer cannot shift the draws
    of another one.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (zlib.crc32(name.encode()), *counter)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
