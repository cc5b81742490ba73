"""Counter-based random streams.

Stream ``(seed, i)`` is a Philox generator keyed from the entropy pair
``(seed, i)``, so any replicate or shard can be regenerated on its own and
results never depend on scheduling.
"""

import numpy as np


def stream(seed, index):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))
