"""Seedable 64-bit PRNG with a fixed algorithm (xoshiro256**).

The generator is pinned so the same (seed, draw sequence) produces the
same decimal strings on any platform or implementation language. State is
initialized from the seed via splitmix64, per the reference construction.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256StarStar:
    """xoshiro256** generator over a 256-bit state."""

    def __init__(self, seed: int):
        state = seed & _MASK
        words = []
        for _ in range(4):
            state = (state + 0x9E3779B97F4A7C15) & _MASK
            z = state
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
            words.append(z ^ (z >> 31))
        self._s = words

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform draw in [lo, hi) using the top 53 bits."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + u * (hi - lo)
