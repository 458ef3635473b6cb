"""Named, seeded random streams.

Each consumer (split, sampling, init, dropout, eval, synth) draws from its
own generator so adding draws in one place never shifts another stream.
"""

import numpy as np

STREAMS = {"split": 1, "sampling": 2, "init": 3, "dropout": 4, "eval": 5, "synth": 6}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))
