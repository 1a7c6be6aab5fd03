"""Deterministic random streams keyed by (seed, phase, ...).

Every stochastic phase draws from its own generator derived from the
run seed and an explicit integer key, so runs are reproducible and a
resumed run replays the exact streams of the interrupted one.
"""

import numpy as np

# phase tags; values are part of the on-disk reproducibility contract
PHASE_GRAPH = 1
PHASE_WEIGHTS = 2
PHASE_DATA = 3
PHASE_HELDOUT = 4
PHASE_POLICY_INIT = 10
PHASE_TRAIN = 11
PHASE_SAMPLE = 12
PHASE_EVAL = 13


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for one (seed, key...) stream, independent of creation order."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))
    )
