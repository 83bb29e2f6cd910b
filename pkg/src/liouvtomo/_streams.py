"""Deterministic RNG substreams.

Every stochastic task in the package draws from a generator keyed by the run
seed plus a fixed integer path (stream family, outcome, block / trajectory).
Results are therefore identical for any worker count: parallelism only
changes which thread executes a task, never the task's random stream.
"""

import numpy as np

QUADRATURE_STREAM = 1
TRAJECTORY_STREAM = 2
ATOM_INIT_STREAM = 3


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream identified by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))
