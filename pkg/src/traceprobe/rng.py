"""Deterministic random streams.

Every random decision in the engine consumes raw U(0,1) draws from an Rng,
which wraps numpy's PCG64 (a 64-bit permuted-congruential generator).  Because
all samplers are built on the single ``uniform`` primitive, each distribution
consumes a documented number of draws (see distributions module), and replaying
a seed replays the exact value sequence.

Child streams for parallel work are derived per task index with a splitmix64
finalizer: ``child_seed = splitmix64(root_seed + GOLDEN * (index + 1))`` in
64-bit wrapping arithmetic.  Derivation depends only on (root seed, index), so
any partitioning of tasks over workers yields the same per-task streams.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 scramble round of a 64-bit value."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(root_seed: int, index: int) -> int:
    """Stable 64-bit child seed for task ``index`` under ``root_seed``."""
    return splitmix64((root_seed + _GOLDEN * (index + 1)) & _MASK64)


class Rng:
    """Seeded uniform stream; the engine's only source of randomness."""

    __slots__ = ("seed", "_gen")

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self) -> float:
        """One draw from U[0,1)."""
        return float(self._gen.random())

    def choice(self, n: int) -> int:
        """One uniform index in [0, n); consumes one draw."""
        if n <= 0:
            raise ValueError("choice requires n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def derive(self, index: int) -> "Rng":
        """Child stream for task ``index``; independent of this stream's state."""
        return Rng(derive_seed(self.seed, index))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
