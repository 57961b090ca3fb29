"""Deterministic random streams.

Every stochastic choice in the pipeline draws from its own generator keyed by
(run seed, purpose, context ints...). Runs are therefore replayable, and
independent purposes (shuffling, flips, Gumbel noise, drop-path masks...)
never steal draws from each other, which is what makes the degenerate
training configurations bit-identical to the baseline.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    """Stable ids for every consumer of randomness."""

    PARAM_INIT = 1
    SHUFFLE = 2
    SPATIAL = 3
    PHOTOMETRIC = 4
    CUTOUT = 5
    MIX = 6
    DROP_PATH = 7
    DROPOUT = 8
    GUMBEL = 9
    DATA_GEN = 10
    CORRUPT = 11


def stream(seed: int, purpose: int, *context: int) -> np.random.Generator:
    """Return the generator for (seed, purpose, context).

    Identical arguments always return a generator in the same state;
    different arguments give statistically independent streams.
    """
    ss = np.random.SeedSequence((int(seed), int(purpose)) + tuple(int(c) for c in context))
    return np.random.Generator(np.random.PCG64(ss))
