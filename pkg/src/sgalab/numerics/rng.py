"""Counter-based random stream.

Every draw is a pure function of ``(seed, counter)``::

    x     = seed + counter * 0x9E3779B97F4A7C15          (mod 2**64)
    x     = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
    x     = (x ^ (x >> 27)) * 0x94D049BB133111EB
    out   = x ^ (x >> 31)

with the counter incremented once per 64-bit word (first word uses
``counter + 1``).  This is the splitmix64 finalizer applied to a Weyl
sequence, so any language with wrapping 64-bit unsigned arithmetic can
reproduce the stream.

Uniforms take the top 53 bits: ``u = ((out >> 11) + 1) * 2**-53`` which
lies in (0, 1].  Normals use Box-Muller on consecutive uniform pairs
``(u1, u2)``: ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def mix64(value: int) -> int:
    """splitmix64 finalizer of a single integer."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


@dataclass
class RngState:
    """Single-owner random stream; every draw advances ``counter``."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed &= _MASK
        self.counter &= _MASK

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        x = np.uint64(self.seed) + idx * _GOLDEN
        self.counter = (self.counter + n) & _MASK
        return _mix(x)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        w = self.words(n)
        u = ((w >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((m, 2))
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, high) (multiply-shift on 53-bit uniforms)."""
        u = self.uniform(shape)
        return np.minimum(np.floor((u - 2.0**-53) * high), high - 1).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniforms; ties have probability ~2**-53 and break by index
        return np.argsort(self.uniform((n,)), kind="stable")

    def split(self, key: int) -> "RngState":
        """Independent child stream keyed by ``key``; does not advance self."""
        child = mix64(self.seed ^ mix64((key * 0xD1B54A32D192ED03 + 1) & _MASK))
        return RngState(child, 0)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)
