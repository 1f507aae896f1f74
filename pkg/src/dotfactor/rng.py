"""Seedable counter-based random source.

Algorithm (stable across runs and platforms):

* A stream is a 64-bit ``key`` plus a 64-bit counter. Draw ``i`` of a
  stream is ``splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)``.
* ``CounterRNG(seed)`` has ``key = seed``. ``child(name, *ids)`` derives a
  new key by folding the FNV-1a 64 hash of ``name`` and each integer id
  through the SplitMix64 finaliser, so named sub-streams never share draws.
* Uniforms are ``(u >> 11) * 2**-53`` in ``[0, 1)``.
* Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` and ``... * sin(2 pi u2)``,
  interleaved, computed in float64 and then cast.
"""

import numpy as np

from . import kernels

_MASK = (1 << 64) - 1


def _fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def _fold(key, value):
    out = kernels.splitmix64_fill((key ^ (value & _MASK)) & _MASK, 0, 1)
    return int(out[0])


class CounterRNG:
    """Counter-based generator; see module docstring for the exact algorithm."""

    def __init__(self, seed=0, *, _key=None):
        if _key is None:
            if seed < 0:
                raise ValueError("seed must be non-negative")
            _key = int(seed) & _MASK
        self.key = _key
        self.counter = 0

    def child(self, name, *ids):
        key = _fold(self.key, _fnv1a64(name))
        for i in ids:
            key = _fold(key, int(i))
        return CounterRNG(_key=key)

    def raw(self, n):
        out = kernels.splitmix64_fill(self.key, self.counter, n)
        self.counter += int(n)
        return out

    def uniform(self, size=None):
        n = int(np.prod(size)) if size is not None else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(size) if size is not None else float(u[0])

    def normal(self, size, dtype=np.float32):
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n].reshape(size).astype(dtype)

    def integers(self, high, size=None):
        """Integers in ``[0, high)`` via ``floor(u * high)``."""
        if high < 1:
            raise ValueError("high must be >= 1")
        u = self.uniform(size if size is not None else 1)
        out = np.minimum((np.asarray(u) * high).astype(np.int64), high - 1)
        return out if size is not None else int(out[0])

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, options):
        return options[self.integers(len(options))]
