"""Derived random streams.

Every random decision in an experiment gets its own generator derived from
the run seed plus a purpose tag, so adding a consumer never shifts the draws
of another.  String tags are hashed stably (crc32), keeping streams
reproducible across processes and versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_key(*keys) -> list:
    """Flatten mixed int/str keys into the integer list numpy seeds accept."""
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode("utf-8")))
        elif isinstance(k, (bool, np.bool_)):
            out.append(int(k))
        elif isinstance(k, (int, np.integer)):
            out.append(int(k) & 0xFFFFFFFF)
        else:
            raise TypeError(f"seed keys must be ints or strings, got {type(k)!r}")
    return out


def rng_for(*keys) -> np.random.Generator:
    """A fresh generator for one purpose, e.g. ``rng_for(seed, "shuffle", task)``."""
    if not keys:
        raise ValueError("at least one seed key is required")
    return np.random.default_rng(seed_key(*keys))
