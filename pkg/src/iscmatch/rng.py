"""SplitMix64, the only randomness source in the package.

Every seeded operation draws from this generator so datasets, weights and
shuffles are reproducible bit-for-bit on any platform.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_TWO_POW_53 = float(1 << 53)


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, matching the scalar path.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


class Rng64:
    """SplitMix64 generator.

    ``uniform`` maps the top 53 bits of an output to the open interval (0, 1)
    by centering each of the 2**53 buckets, so neither endpoint is reachable.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self) -> str:
        return f"Rng64(state=0x{self.state:016X})"

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array, identical to ``n`` calls of ``next_u64``."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self) -> float:
        return ((self.next_u64() >> 11) + 0.5) / _TWO_POW_53

    def uniform_array(self, n: int) -> np.ndarray:
        bits = self.next_u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) / _TWO_POW_53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def symmetric_array(self, n: int, scale: float = 1.0) -> np.ndarray:
        """``n`` draws from uniform(-scale, scale)."""
        return scale * (2.0 * self.uniform_array(n) - 1.0)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + min(int(math.floor(self.uniform() * span)), span - 1)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]
        return items

    def spawn(self) -> Rng64:
        """Independent child stream seeded from this stream's next output."""
        return Rng64(self.next_u64())

    def bytes_array(self, n: int) -> np.ndarray:
        """``n`` uniform bytes (the top byte of each output)."""
        return (self.next_u64_array(n) >> np.uint64(56)).astype(np.uint8)
