"""Counter-based pseudo-random generator used everywhere determinism matters.

A stateless splitmix64-style mix of (key, counter) drives every draw, so the
same seed produces the same bytes regardless of platform, call interleaving,
or worker count. Streams are derived by hashing tags into new keys; each
worker or pipeline stage owns its own derived stream.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; wraps mod 2**64."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _fold_tag(key: np.uint64, tag) -> np.uint64:
    if isinstance(tag, str):
        h = _U64(0xCBF29CE484222325)
        with np.errstate(over="ignore"):
            for b in tag.encode("utf-8"):
                h = (h ^ _U64(b)) * _U64(0x100000001B3)
        tag_val = h
    else:
        tag_val = _U64(int(tag) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        return _mix64(key ^ _mix64(tag_val + _GOLDEN))


class Rng:
    """Deterministic counter-based stream; draws advance an internal counter."""

    def __init__(self, seed: int, _counter: int = 0):
        self._key = _U64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = int(_counter)

    @property
    def key(self) -> int:
        return int(self._key)

    def derive(self, *tags) -> "Rng":
        """Independent child stream keyed by (self.key, tags); counter reset."""
        key = self._key
        for tag in tags:
            key = _fold_tag(key, tag)
        return Rng(int(key))

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + (counters + _U64(1)) * _GOLDEN)

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform on the open interval (0, 1)."""
        scalar = shape is None
        shape = () if scalar else (tuple(shape) if not np.isscalar(shape) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = ((self._raw(n) >> _U64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
        return float(vals[0]) if scalar else vals.reshape(shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        """Gaussian draws via Box-Muller on paired uniforms."""
        scalar = shape is None
        shape = () if scalar else (tuple(shape) if not np.isscalar(shape) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        u1 = self.uniform((m,))
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        z = mean + std * z
        return float(z[0]) if scalar else z.reshape(shape)

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def integers(self, lo: int, hi: int, shape=None):
        """Integers in [lo, hi); rejection-free via 64-bit modulo (bias < 2**-40 at desk scale)."""
        scalar = shape is None
        shape = () if scalar else (tuple(shape) if not np.isscalar(shape) else (shape,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = _U64(hi - lo)
        vals = (self._raw(n) % span).astype(np.int64) + lo
        return int(vals[0]) if scalar else vals.reshape(shape)

    def bernoulli(self, p: float, shape=None):
        u = self.uniform(shape)
        return u < p

    def shuffled(self, items: list) -> list:
        """Fisher-Yates with this stream; input untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out
