"""Counter-based pseudo-random generator used everywhere randomness is needed.

The generator is a SplitMix64 hash applied to a running counter.  Because
every draw is a pure function of (seed, stream, counter), any sample, weight
tensor, or batch order can be regenerated independently and identically in
any implementation that uses the same constants:

    state   = mix64(seed * GAMMA ^ mix64(stream))
    draw i  = finalize(state + (i + 1) * GAMMA)

with GAMMA = 0x9E3779B97F4A7C15 and the finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic mod 2**64).  Uniform doubles take the top 53 bits of z.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / (1 << 53)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a single 64-bit value."""
    z = np.uint64(x & 0xFFFFFFFFFFFFFFFF)
    return int(_finalize(np.asarray([z]))[0])


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a parameter or purpose name (FNV-1a)."""
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class SplitMix(object):
    """Deterministic random stream keyed by (seed, stream).

    Draws are counter-based: the n-th value of a given stream is always the
    same regardless of how earlier values were consumed (scalar or in bulk).
    """

    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        base = (seed & 0xFFFFFFFFFFFFFFFF) * 0x9E3779B97F4A7C15
        self._key = np.uint64((base ^ mix64(stream)) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _finalize(self._key + idx * _GAMMA)

    def uniform(self, n: int = 1) -> np.ndarray:
        """n doubles uniform in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def uniform_range(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def normal(self, n: int = 1) -> np.ndarray:
        """n standard-normal doubles via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def integers(self, bound: int, n: int = 1) -> np.ndarray:
        """n integers uniform in [0, bound) by 53-bit rejection-free scaling."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return (self.uniform(n) * bound).astype(np.int64)
