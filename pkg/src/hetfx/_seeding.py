"""Seed derivation shared by every stochastic routine.

All randomness flows from one integer master seed. Sub-streams are keyed by
integer paths (replicate index, tree index, ...) so results never depend on
execution order or worker count.
"""

from __future__ import annotations

import numpy as np

# stream tags, kept distinct so sub-streams never collide
HONEST_SPLIT = 1
CV_FOLDS = 2
BOOTSTRAP = 3
STABILITY = 4
FOREST_GROUP = 5
FOREST_TREE = 6


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed of ``seed`` along the key path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))
