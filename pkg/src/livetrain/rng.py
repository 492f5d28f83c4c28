"""Explicit, serializable PRNG for reproducible training and replay.

xoshiro256** with splitmix64 seeding. The full generator state is four
unsigned 64-bit words, embedded verbatim in checkpoints so a restored run
continues the exact same random stream on any platform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, (z ^ (z >> 31)) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** generator with fully serializable state."""

    __slots__ = ("_s",)

    def __init__(self, seed: int = 0):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        # All-zero state is invalid for xoshiro; splitmix64 cannot produce it
        # from any seed, but guard anyway.
        if not any(s):
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float64 in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """One Gaussian draw via Box-Muller (no cached spare: stateless
        beyond the core words, so serialization stays trivial)."""
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randrange bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform_array(self, shape: tuple[int, ...], low: float, high: float) -> np.ndarray:
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            flat[i] = self.uniform(low, high)
        return out

    def normal_array(self, shape: tuple[int, ...], mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            flat[i] = self.normal(mu, sigma)
        return out

    def getstate(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def setstate(self, state: tuple[int, int, int, int] | list[int]) -> None:
        words = [int(w) for w in state]
        if len(words) != 4 or not all(0 <= w <= _MASK64 for w in words):
            raise ValueError("rng state must be four unsigned 64-bit words")
        if not any(words):
            raise ValueError("rng state must not be all zero")
        self._s = words

    @classmethod
    def fromstate(cls, state) -> "Xoshiro256StarStar":
        rng = cls(0)
        rng.setstate(state)
        return rng
