"""Deterministic, splittable random number generation.

One counter-based generator family (Philox) is used everywhere so that a
single top-level seed reproduces every draw, and independent streams for
parallel trajectories come from SeedSequence spawning rather than ad-hoc
seed arithmetic.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed) -> np.random.Generator:
    """A fresh Philox generator for an integer seed or SeedSequence."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, n: int):
    """n independent generators derived from one seed."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return [make_rng(child) for child in seed.spawn(n)]
