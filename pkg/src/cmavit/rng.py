"""Reproducible, splittable random streams.

Every stream is a numpy ``Generator`` over the Philox-4x64 counter-based
bit generator, keyed by a ``SeedSequence`` whose spawn key is the stream
path. Philox output is specified bit-for-bit, so identical (seed, path)
pairs give identical draws on every platform.

String path components are mapped to integers with the first 8 bytes of
BLAKE2b, so ``make_rng(7, "block", 3)`` is stable across processes (Python's
built-in ``hash`` is salted per process and is not used).
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path components must be non-negative")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for stream ``path`` under root ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(stream_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
