"""Deterministic derivation of independent random streams.

Every stochastic task (an optimizer start, a bootstrap replicate, a Monte
Carlo repetition) draws from its own stream keyed by ``(seed, *key)``, so
results do not depend on the order in which tasks are scheduled.
"""
import zlib

import numpy as np


def _key_int(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed, *key):
    """Return a 63-bit integer seed for the sub-task identified by ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def derive_rng(seed, *key):
    """Return a ``numpy.random.Generator`` for the sub-task identified by ``key``."""
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    )
