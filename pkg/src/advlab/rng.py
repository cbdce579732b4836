"""Seeded random streams.

All randomness flows through :func:`make_rng`, which returns a numpy
``Generator`` on the PCG64 bit generator. Extra integer keys select
statistically independent sub-streams of the same seed, so e.g. the shuffle
order of epoch 7 never depends on how many draws epoch 6 consumed.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


# sub-stream identifiers
STREAM_INIT = 1
STREAM_TOY = 2
STREAM_SHUFFLE = 3
STREAM_ATTACK = 4
STREAM_LANDSCAPE = 5
STREAM_EVAL_SUBSET = 6
