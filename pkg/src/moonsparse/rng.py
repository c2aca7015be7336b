"""Seeded xoshiro256** generator.

Every random draw in the package goes through :class:`SeededRng`, so a run is
a deterministic function of its seed. The state is seeded from a 64-bit
integer with splitmix64, the generator's reference seeding procedure.
Uniform doubles take the top 53 bits, and normals come from Box-Muller pairs.
"""

from __future__ import annotations

import numba
import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_NEG53 = 1.0 / (1 << 53)


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = np.float64(_next(s) >> np.uint64(11)) * 1.1102230246251565e-16


@numba.njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - np.float64(_next(s) >> np.uint64(11)) * 1.1102230246251565e-16
        u2 = np.float64(_next(s) >> np.uint64(11)) * 1.1102230246251565e-16
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out[i] = r * np.cos(theta)
        if i + 1 < n:
            out[i + 1] = r * np.sin(theta)
        i += 2


@numba.njit(cache=True)
def _partial_shuffle(s, arr, k):
    # Fisher-Yates from the front: arr[:k] becomes a uniform k-subset in random order.
    n = arr.shape[0]
    for i in range(k):
        u = np.float64(_next(s) >> np.uint64(11)) * 1.1102230246251565e-16
        j = i + np.int64(u * (n - i))
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


class SeededRng:
    """xoshiro256** stream with a 64-bit seed.

    Single-owner: do not share one instance between concurrent callers.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(int(v) for v in self._s)

    @state.setter
    def state(self, words):
        self._s = np.array([int(w) & _MASK64 for w in words], dtype=np.uint64)

    def copy(self) -> "SeededRng":
        twin = SeededRng.__new__(SeededRng)
        twin.seed = self.seed
        twin._s = self._s.copy()
        return twin

    def spawn(self) -> "SeededRng":
        """Child stream seeded from the next output of this one."""
        return SeededRng(self.next_u64())

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._s, out)
        return int(out[0])

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1); a scalar when ``n`` is None."""
        out = np.empty(1 if n is None else int(n), dtype=np.float64)
        _fill_uniform(self._s, out)
        return float(out[0]) if n is None else out

    def standard_normal(self, n: int) -> np.ndarray:
        """``n`` standard normals. Pairs are consumed whole; an odd tail drops its sine half."""
        out = np.empty(int(n), dtype=np.float64)
        _fill_normal(self._s, out)
        return out

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) as floor(u * high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        arr = np.arange(n, dtype=np.int64)
        _partial_shuffle(self._s, arr, max(n - 1, 0))
        return arr

    def sample_without_replacement(self, pool: np.ndarray, k: int) -> np.ndarray:
        """``k`` distinct entries of ``pool`` (order of selection preserved)."""
        arr = np.array(pool, dtype=np.int64, copy=True)
        if k > arr.shape[0]:
            raise ValueError(f"cannot draw {k} items from a pool of {arr.shape[0]}")
        _partial_shuffle(self._s, arr, int(k))
        return arr[:k].copy()
