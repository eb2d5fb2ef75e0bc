"""Counter-based random streams derived from one root seed.

Every stream is keyed by ``(seed, purpose, *counters)`` so that a resumed or
reordered computation draws exactly the same numbers as an uninterrupted one.
"""

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    keys = (_purpose_key(purpose),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))
