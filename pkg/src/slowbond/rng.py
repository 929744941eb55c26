"""Counter-based per-replica seeding.

Replica ``i`` of a run with base seed ``s`` is driven by the 32-bit word
``SeedSequence(s, spawn_key=(i,)).generate_state(1)[0]``. The word depends
only on ``(s, i)``, so results do not depend on how replicas are batched.
"""
from __future__ import annotations

import numpy as np


def replica_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(i),)).generate_state(1, dtype=np.uint32)[0])


def replica_seeds(seed: int, count: int, offset: int = 0) -> np.ndarray:
    return np.array([replica_seed(seed, offset + i) for i in range(count)], dtype=np.int64)


def mean_ci(samples, sigmas: float = 3.0) -> tuple[float, float]:
    """Sample mean and ``sigmas`` standard errors (pairwise summation)."""
    x = np.asarray(samples, dtype=float)
    m = float(np.mean(x))
    if x.size < 2:
        return m, float("inf")
    return m, sigmas * float(np.std(x, ddof=1)) / np.sqrt(x.size)
