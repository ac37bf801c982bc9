"""Seeded random number generation.

All stochastic state in the package flows through :class:`Rng`, a thin
wrapper over numpy's PCG64 bit generator. Identical seeds reproduce
bit-identical draw sequences across runs (within the float determinism of
a single numpy build).
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "pcg64"


class Rng:
    """Deterministic generator; `seed` and `algorithm` identify the stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = RNG_ALGORITHM
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self) -> "Rng":
        """Derive an independent generator; consumes one draw from this one."""
        return Rng(int(self._gen.integers(0, 2**63)))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def trunc_normal(self, shape, std=0.02, clip=2.0, dtype=np.float32):
        """Truncated normal draw: N(0, std) resampled until within clip*std."""
        out = self._gen.normal(0.0, std, size=shape)
        bound = clip * std
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out.astype(dtype)
