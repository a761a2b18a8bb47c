"""Deterministic RNG substream derivation.

Every engine draws its per-step randomness from a substream keyed by
(master seed, step index, ...). Substreams are independent of how much
randomness any other substream consumed, so runs are reproducible no
matter how work is scheduled and results never depend on thread count.
"""

import numpy as np


def substream(seed, *key):
    """Return a Generator for the given (seed, key...) coordinates.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    *key : int
        Coordinates of the substream, e.g. a step index.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
