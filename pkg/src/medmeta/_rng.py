"""Splittable deterministic random streams.

Streams are Philox (counter-based) generators keyed by a seed plus an
arbitrary path of integer/string keys, so replicate ``r`` of task ``t``
always sees the same numbers regardless of execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return int(part)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return the generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))
