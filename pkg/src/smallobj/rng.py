"""Seedable, platform-independent random streams.

Raw 64-bit words come from numpy's PCG64 bit generator seeded through
``SeedSequence``; both are specified bit-for-bit and do not depend on the
platform. Everything above the raw words (floats, integers, normals) is
derived here so that numpy ``Generator`` method changes cannot alter a stream.
"""
from __future__ import annotations

import zlib

import numpy as np

_TWO_M53 = 2.0 ** -53


def _key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Deterministic stream keyed by ``(seed, *path)``.

    ``child("layer.name")`` derives an independent stream, so adding or
    removing one consumer never shifts the draws of another.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._bits = np.random.PCG64(ss)

    def child(self, name: str | int) -> "Rng":
        return Rng(self.seed, self.path + (_key(name),))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        k = 1 if n is None else n
        out = (self.raw(k) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return float(out[0]) if n is None else out

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.random(n)
        if n is None:
            return int(low + int(u * (high - low)))
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def normal(self, n: int | None = None):
        """Standard normals via Box-Muller."""
        k = 1 if n is None else n
        u1 = 1.0 - self.random(k)  # (0, 1]
        u2 = self.random(k)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if n is None else z

    def choice(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w / w.sum())
        idx = int(np.searchsorted(cdf, self.random(), side="right"))
        return min(idx, len(w) - 1)
