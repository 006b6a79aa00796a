"""Small explicit-state random generator (splitmix64).

Every stochastic choice in the package (weight init, synthetic placement,
prompt sampling, per-sample seeds) goes through this generator so results
are bit-identical across runs, platforms and library versions.  No global
state: each consumer owns its own ``SplitMix64`` instance.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; stable everywhere (unlike builtin ``hash``)."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, name: str) -> int:
    """Fold a string identifier into a seed, order-independently.

    Used for per-sample work so results do not depend on scheduling or
    worker count.
    """
    return _mix((seed & _MASK64) ^ fnv1a64(name.encode("utf-8")))


class SplitMix64:
    """Deterministic 64-bit generator with a single word of state."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare_gauss: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n); rejection-sampled, unbiased."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.randrange(hi - lo + 1)

    def gauss(self) -> float:
        """Standard normal via Box-Muller (explicit spare, no global state)."""
        if self._spare_gauss is not None:
            value = self._spare_gauss
            self._spare_gauss = None
            return value
        u1 = self.next_float()
        while u1 <= 1e-300:
            u1 = self.next_float()
        u2 = self.next_float()
        radius = math.sqrt(-2.0 * math.log(u1))
        self._spare_gauss = radius * math.sin(2.0 * math.pi * u2)
        return radius * math.cos(2.0 * math.pi * u2)

    def sample_without_replacement(self, items: list, k: int) -> list:
        """First k entries of a seeded Fisher-Yates shuffle of ``items``."""
        pool = list(items)
        n = len(pool)
        k = min(k, n)
        for i in range(k):
            j = self.randint(i, n - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
