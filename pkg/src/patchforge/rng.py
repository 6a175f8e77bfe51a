"""Counter-based deterministic random streams.

Every stream output is a pure function of (seed, purpose, counter), so a
stream can be reproduced on any platform and split into independent
substreams without sharing mutable state. The generator is SplitMix64
(Steele, Lea & Flood 2014), whose constants are fixed below and must not
change: manifests, caches and probe runs all key their reproducibility off
this exact sequence.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1

# SplitMix64 constants.
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

# FNV-1a (64-bit), used to fold a purpose tag into the seed.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(x: int) -> int:
    """SplitMix64 finalizer: bijective avalanche mix of a 64-bit word."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class RandomStream:
    """One named substream of the counter-based generator.

    Draw i of stream (seed, purpose) is ``mix64(key + (i+1) * GOLDEN_GAMMA)``
    with ``key = mix64(seed ^ fnv1a(purpose))``. Streams with different
    purposes are statistically independent, so each consumer (slide choice,
    coordinates, magnification, cache draws, ...) gets its own stream and
    draws in one stream never perturb another.
    """

    def __init__(self, seed: int, purpose: str = ""):
        self.seed = seed
        self.purpose = purpose
        self._key = mix64((seed & _MASK64) ^ _fnv1a(purpose.encode("utf-8")))
        self._counter = 0

    def substream(self, purpose: str) -> "RandomStream":
        """Derive an independent child stream from the same seed."""
        return RandomStream(self.seed, f"{self.purpose}/{purpose}")

    def next_u64(self) -> int:
        self._counter += 1
        return mix64((self._key + self._counter * GOLDEN_GAMMA) & _MASK64)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform float in [low, high) with 53 bits of precision."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return low + u * (high - low)

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange() requires n >= 1")
        limit = ((1 << 64) // n) * n
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in the inclusive range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        return low + self.randrange(high - low + 1)

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def weighted_index(self, weights) -> int:
        """Index i with probability weights[i] / sum(weights)."""
        total = 0.0
        for w in weights:
            if w < 0:
                raise ValueError("weights must be non-negative")
            total += w
        if total <= 0.0:
            raise ValueError("weights must not all be zero")
        u = self.uniform(0.0, total)
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1  # u == total under FP rounding

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]
