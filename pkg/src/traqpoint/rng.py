"""Named, splittable random streams.

A stream is identified by a seed plus any number of keys (ints, strings or
nested tuples of those). Identical identifiers always give identical draws, so
work can be split across workers without changing results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _words(key):
    if isinstance(key, (tuple, list)):
        out = [len(key)]
        for k in key:
            out.extend(_words(k))
        return out
    if isinstance(key, str):
        return [zlib.crc32(key.encode("utf-8"))]
    k = int(key)
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return [k & 0xFFFFFFFF, k >> 32]


def stream(seed, *keys):
    """A Philox-backed ``numpy.random.Generator`` for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=_words(seed), spawn_key=tuple(_words(keys)))
    return np.random.Generator(np.random.Philox(ss))
