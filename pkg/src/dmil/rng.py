"""Deterministic 64-bit random stream used everywhere the package needs randomness.

The generator is a splitmix-style counter RNG: the state advances by a fixed
odd constant and each output is a bijective mix of the new state.  All
arithmetic is modulo 2**64, so streams are byte-identical across platforms.
Uniform doubles use the top 53 bits of one output; standard normals use
Box-Muller with one (cos-branch) sample per pair of uniforms.  Test vectors
live in tests/data/rng_vectors.json.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64 = np.uint64
_TWO_NEG53 = 2.0**-53


def mix64(z: int) -> int:
    """Output mixing function: bijective avalanche on 64-bit integers."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(root: int, *branches: int) -> int:
    """Stable sub-stream seed from a root seed and integer branch labels.

    Folding is sequential, so derive_seed(s, a, b) != derive_seed(s, b, a)
    in general; call sites fix their branch order.
    """
    s = mix64(root)
    for b in branches:
        s = mix64((s + GAMMA + (b & MASK64)) & MASK64)
    return s


class SplitMix64:
    """Sequential stream; next_array(n) equals n next_u64() calls exactly."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_array(self, n: int) -> np.ndarray:
        """n outputs as a uint64 array (vectorized over the counter)."""
        steps = np.arange(1, n + 1, dtype=_U64)
        z = _U64(self.state) + _U64(GAMMA) * steps
        self.state = (self.state + n * GAMMA) & MASK64
        z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
        z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
        return z ^ (z >> _U64(31))

    # ---- floating point ----

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n doubles in [low, high), from the top 53 bits of each output."""
        u = (self.next_array(n) >> _U64(11)).astype(np.float64) * _TWO_NEG53
        return low + (high - low) * u

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * _TWO_NEG53
        return low + (high - low) * u

    def normal_array(self, n: int, std: float = 1.0) -> np.ndarray:
        """n standard-normal doubles via Box-Muller (cos branch only)."""
        u = self.next_array(2 * n)
        u1 = ((u[0::2] >> _U64(11)) + _U64(1)).astype(np.float64) * _TWO_NEG53  # (0, 1]
        u2 = (u[1::2] >> _U64(11)).astype(np.float64) * _TWO_NEG53  # [0, 1)
        return std * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    # ---- integers ----

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is negligible for n << 2**64."""
        return self.next_u64() % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n), platform-stable."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx
