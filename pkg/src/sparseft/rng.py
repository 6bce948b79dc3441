"""Seeded, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by a seed plus a
path of integers or strings, so independent components never share state
and the same (seed, path) always yields the same numbers.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    seq = np.random.SeedSequence([_key(seed), *(_key(p) for p in path)])
    return np.random.Generator(np.random.Philox(seq))
