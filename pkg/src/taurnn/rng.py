"""Seedable 64-bit PRNG used for every random draw that lands in a dataset or
an initial parameter value.

The generator is SplitMix64 (Steele, Lea, Flood 2014): a single 64-bit counter
advanced by the golden-gamma constant and finalized by a variant of the MurmurHash3
mixer. It is trivially portable, so datasets written by this package can be
regenerated bit-for-bit from (seed,) in any language. numpy's generators are
deliberately not used on these paths.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2^-53, so next_double() covers [0, 1) on the 53-bit grid.
_DOUBLE_UNIT = 2.0 ** -53


class SplitMix64:
    """SplitMix64 stream. State is one 64-bit word; output is a mixed copy."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        """Next raw 64-bit output."""
        self._state = (self._state + _GOLDEN_GAMMA) & _MASK64
        x = self._state
        x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
        x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
        return x ^ (x >> 31)

    def next_double(self) -> float:
        """Uniform double in [0, 1), using the top 53 bits."""
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform double in [lo, hi)."""
        return lo + (hi - lo) * self.next_double()

    def next_below(self, n: int) -> int:
        """Uniform integer in {0, ..., n-1}.

        Implemented as floor(next_double() * n), exact for n <= 2^53; the draw
        consumes exactly one 64-bit output, which keeps streams easy to replay.
        """
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        return int(self.next_double() * n)

    def fill(self, out, lo: float = 0.0, hi: float = 1.0) -> None:
        """Fill a numpy array in C order with uniform draws from [lo, hi)."""
        flat = out.reshape(-1)
        for i in range(flat.shape[0]):
            flat[i] = self.uniform(lo, hi)


def split_seed(seed: int, n: int) -> list[int]:
    """Derive n independent sub-seeds from one master seed.

    Sub-seed k is the k-th output of SplitMix64(seed); callers use a fixed,
    documented position for each purpose so streams never alias.
    """
    rng = SplitMix64(seed)
    return [rng.next_u64() for _ in range(n)]
