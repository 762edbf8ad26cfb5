"""Splittable counter-based random streams.

Each :class:`Rng` owns a Philox generator keyed by ``(seed, path)``. Splitting
by name gives an independent child stream, so two model variants that share a
parameter name draw identical values for it regardless of what else they
build.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.blake2b(str(name).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *names) -> "Rng":
        return Rng(self.seed, self.path + tuple(_name_key(n) for n in names))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, depth={len(self.path)})"

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=size) * std

    def trunc_normal(self, size, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std**2) redrawn until every value lies within ``bound`` stds."""
        out = self._gen.standard_normal(size=size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
