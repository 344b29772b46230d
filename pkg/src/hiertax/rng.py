"""Deterministic randomness for the whole pipeline.

A single SplitMix64 generator per purpose, derived from one root seed via
purpose-labelled substreams, so every dataset, initialization, shuffle and
augmentation is reproducible bit-for-bit from the root seed alone.
Bulk fills are delegated to the kernel backend (compiled or pure); scalar
draws and bulk fills advance the state identically.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """SplitMix64 output finalizer."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class SplitMix64:
    """SplitMix64 stream with labelled substream derivation.

    The state advances by the golden-ratio increment per raw draw;
    gaussians consume two raw draws per Box-Muller pair (odd-length fills
    discard the trailing sine value).
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._state = self.seed

    def substream(self, label: str) -> "SplitMix64":
        """Independent stream keyed by (this stream's seed, label)."""
        return SplitMix64(mix64(self.seed ^ fnv1a64(label)))

    def next_uint64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)

    def next_double(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_uint64() >> 11) * (1.0 / 9007199254740992.0)

    def next_below(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via modulo reduction."""
        return self.next_uint64() % n

    def fill_uint64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        self._state = int(_kernels.splitmix_fill_u64(self._state, out))
        return out

    def fill_uniform(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        self._state = int(_kernels.uniform_fill(self._state, out))
        return out

    def fill_gaussian(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        self._state = int(_kernels.gaussian_fill(self._state, out))
        return out

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)
