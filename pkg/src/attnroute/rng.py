"""Seeded random substreams.

All randomness in a run flows from one root seed. Independent consumers
(data generation, Gumbel noise, weight init, benchmarking) each get a named
substream so that adding draws to one consumer never perturbs another.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "gumbel", "init", "bench", "probe", "dual")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return a generator for ``name`` derived deterministically from ``root_seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([root_seed & 0xFFFFFFFF, tag]))


def spawn_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` independent 31-bit seeds (e.g. one per generated example)."""
    return rng.integers(0, 2**31 - 1, size=n)
