"""Named, seedable RNG streams.

Every random draw in the simulator comes from a generator derived from the
experiment seed plus a purpose tag and optional indices (round, device, ...).
Mixing happens through ``numpy.random.SeedSequence``, so streams are
independent of each other and of execution order: device 7's data stream is
the same whether devices are generated serially or on parallel workers.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keep unrelated streams from colliding when they share indices.
TAG_DATA = 1
TAG_SHARED_OPTIMUM = 2
TAG_SIZES = 3
TAG_PARTITION = 4
TAG_INIT = 5
TAG_PARTICIPATION = 6
TAG_SOLVER = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, *key)``.

    Identical arguments always yield an identical stream, on every platform.
    """
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))
