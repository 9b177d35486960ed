"""Deterministic, splittable random streams.

Streams are numpy Generators over the counter-based Philox bit generator,
keyed by a seed plus any number of integer or string stream labels.  The
same key always gives the same stream, independent of platform.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError(f"stream labels must be non-negative, got {key}")
    return key


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Return the generator for ``(seed, *stream)``."""
    entropy = [_label(seed)] + [_label(k) for k in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream) -> int:
    """A 63-bit child seed for ``(seed, *stream)``, for handing to workers or files."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
