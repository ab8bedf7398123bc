"""SplitMix64 pseudo-random generator.

Every random draw in the package (initialisation, data synthesis, shuffling)
goes through this generator so a run is a pure function of its seed. Streams
for independent purposes are derived with :meth:`SplitMix64.child`, which
keeps e.g. the shuffling order unaffected by how many parameters a model
variant initialises.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtr, ndtri

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finaliser."""
    return int(_mix(np.array([value & MASK64], dtype=np.uint64))[0])


def _key_hash(key) -> int:
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SplitMix64:
    """Counter-style SplitMix64 with vectorised bulk draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def getstate(self) -> int:
        return self.state

    def setstate(self, state: int) -> None:
        self.state = int(state) & MASK64

    def child(self, *keys) -> "SplitMix64":
        """Independent stream keyed by ``keys``; does not advance this one."""
        s = self.state
        for key in keys:
            s = mix64(s ^ _key_hash(key))
        return SplitMix64(s)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(counters)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self.uniform((n,))
        u2 = self.uniform((n,))
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def trunc_normal(self, shape=(), std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to +-bound standard deviations (inverse CDF)."""
        lo, hi = ndtr(-bound), ndtr(bound)
        u = lo + (hi - lo) * self.uniform(shape)
        return std * ndtri(u)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def seed64(self) -> int:
        return int(self.next_u64(1)[0])
