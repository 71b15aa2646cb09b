"""Portable pseudo-random streams for the scene generator (see docs/PRNG.md)."""
import math

import numpy as np

from app.exceptions import ConfigError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_XORSHIFT_MULT = 0x2545F4914F6CDD1D
_DOUBLE_UNIT = 2.0**-53
# exp(-rate) must stay a normal double for the multiplication method
MAX_POISSON_RATE = 500.0


def splitmix64(x: int) -> int:
    """One splitmix64 output for input x (the state advance is folded in)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Fold integers into one 64-bit key: k = splitmix64(k ^ splitmix64(part))."""
    key = 0
    for part in parts:
        key = splitmix64(key ^ splitmix64(part & MASK64))
    return key


class XorShift64Star:
    """xorshift64* generator (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D)."""

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or GOLDEN_GAMMA

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * _XORSHIFT_MULT) & MASK64

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def randbelow(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def poisson(self, lam: float) -> int:
        """Knuth's multiplication method, for rates up to MAX_POISSON_RATE."""
        if lam < 0:
            raise ValueError("rate must be non-negative")
        if lam > MAX_POISSON_RATE:
            raise ConfigError(f"Poisson rate {lam} exceeds the supported maximum {MAX_POISSON_RATE}")
        if lam == 0:
            return 0
        limit = math.exp(-lam)
        k, p = 0, 1.0
        while True:
            p *= self.uniform()
            if p <= limit:
                return k
            k += 1


def counter_uniforms(key: int, start: int, count: int) -> np.ndarray:
    """
    Counter-based uniforms: u_n = (splitmix64(key + n * gamma) >> 11) * 2^-53,
    for n = start, ..., start + count - 1 (arithmetic mod 2^64).

    Each value depends only on (key, index), so any slice can be produced
    independently and in any order.
    """
    with np.errstate(over="ignore"):
        counters = np.arange(start, start + count, dtype=np.uint64) + np.uint64(1)
        z = np.uint64(key) + counters * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * _DOUBLE_UNIT


def counter_normals(key: int, start: int, count: int) -> np.ndarray:
    """Approximate standard normals: Irwin-Hall sum of 12 uniforms minus 6."""
    u = counter_uniforms(key, 12 * start, 12 * count).reshape(count, 12)
    # explicit left-to-right accumulation keeps the rounding order fixed
    acc = u[:, 0].copy()
    for c in range(1, 12):
        acc = acc + u[:, c]
    return acc - 6.0
