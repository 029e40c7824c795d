"""Named random streams split from one 64-bit seed.

Each consumer (episode sampling, weight init, augmentation, ...) draws from its own
stream, optionally indexed (e.g. by trial), so reseeding one never shifts another.
"""

import numpy as np

STREAMS = {
    "sampler": 1,
    "init": 2,
    "augment": 3,
    "selection": 4,
    "fisher": 5,
    "meta": 6,
    "data": 7,
}


def stream(seed, name, *index):
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    key = (STREAMS[name],) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=key))
