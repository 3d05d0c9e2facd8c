"""Deterministic RNG stream derivation.

Every stochastic routine in the package takes an explicit
``numpy.random.Generator``. Streams are derived from a master seed with
``SeedSequence(master, spawn_key=...)`` so that stream k never changes when
more streams are added: replica i always gets spawn_key ``(i,)``, and a
named purpose inside replica i gets ``(i, purpose_id)``.
"""

from __future__ import annotations

import numpy as np

# Stable purpose ids; append only, never renumber.
PURPOSES = {
    "env": 0,
    "agent": 1,
    "eval": 2,
    "data": 3,
    "init": 4,
}


def replica_seed(master_seed: int, replica: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(replica,))


def stream(master_seed: int, replica: int, purpose: str) -> np.random.Generator:
    """RNG for one (replica, purpose) pair, independent of all others."""
    pid = PURPOSES[purpose]
    ss = np.random.SeedSequence(master_seed, spawn_key=(replica, pid))
    return np.random.default_rng(ss)


def rng_from(seed) -> np.random.Generator:
    """Coerce an int seed / SeedSequence / Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
