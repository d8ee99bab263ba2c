"""Deterministic pseudo-random streams, identical across platforms.

Integer draws are bit-exact everywhere; float draws are exact too since they
are pure IEEE-754 arithmetic on exactly representable integers.  Gaussian
variates go through transcendental functions (log, sqrt, cos) and are only
guaranteed stable per platform/libm.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea, Flood 2014).
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``; used for seeding and stream derivation."""
    x = (x + _SM_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a base seed, giving independent named substreams."""
    s = splitmix64(seed & _MASK64)
    for k in keys:
        s = splitmix64((s ^ (k & _MASK64)) & _MASK64)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator (Blackman, Vigna 2018), seeded via splitmix64."""

    __slots__ = ("_s", "_gauss_cache")

    def __init__(self, seed: int):
        seed &= _MASK64
        s = []
        x = seed
        for _ in range(4):
            x = (x + _SM_GAMMA) & _MASK64
            s.append(splitmix64(x))
        # All-zero state would be absorbing; splitmix64 seeding cannot produce it
        # for four consecutive outputs, but guard anyway.
        if not any(s):
            s[0] = _SM_GAMMA
        self._s = s
        self._gauss_cache: float | None = None

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

    def uniform(self) -> float:
        """Uniform float64 in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def randint(self, n: int) -> int:
        """Integer in [0, n).  Modulo reduction; bias is < n / 2**64, irrelevant here."""
        if n <= 0:
            raise ValueError("randint bound must be positive, got %d" % n)
        return self.next_u64() % n

    def normal(self) -> float:
        """Standard Gaussian via Box-Muller, caching the paired variate."""
        if self._gauss_cache is not None:
            g = self._gauss_cache
            self._gauss_cache = None
            return g
        u1 = 1.0 - self.uniform()  # in (0, 1], keeps log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_cache = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def derive(self, *keys: int) -> "Rng":
        """Child generator on an independent stream named by integer keys."""
        base = self._s[0] ^ self._s[2]
        return Rng(derive_seed(base, *keys))
