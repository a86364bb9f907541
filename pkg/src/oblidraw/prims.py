"""Data-independent primitives: small-domain PRP and the comparator schedule.

The PRP is a balanced Feistel network over the smallest even-bit domain
covering [0, n), brought back into range by cycle walking.  The comparator
schedule is Batcher's odd-even mergesort on the next power of two; its pair
sequence is a function of n alone, which is what makes the sort oblivious.
"""
from __future__ import annotations

import functools

import numpy as np

from .mix import MASK64, derive, splitmix64, splitmix64_np

_FEISTEL_ROUNDS = 4


class Prp:
    """Keyed bijection on [0, n). Deterministic given (key, n)."""

    __slots__ = ("n", "key", "_half_bits", "_half_mask", "_round_keys")

    def __init__(self, key: int, n: int):
        if n < 1:
            raise ValueError("PRP domain must be at least 1")
        self.n = n
        self.key = key & MASK64
        bits = max(2, (n - 1).bit_length())
        self._half_bits = (bits + 1) // 2
        self._half_mask = (1 << self._half_bits) - 1
        self._round_keys = tuple(derive(self.key, "feistel", r) for r in range(_FEISTEL_ROUNDS))

    def _walk(self, x: int) -> int:
        hb, hm = self._half_bits, self._half_mask
        left, right = x >> hb, x & hm
        for rk in self._round_keys:
            left, right = right, left ^ (splitmix64(right ^ rk) & hm)
        return (left << hb) | right

    def __call__(self, x: int) -> int:
        if not 0 <= x < self.n:
            raise ValueError(f"PRP input {x} outside [0, {self.n})")
        if self.n == 1:
            return 0
        y = self._walk(x)
        while y >= self.n:
            y = self._walk(y)
        return y

    def eval_all(self) -> np.ndarray:
        """Vectorised evaluation over the whole domain; returns uint64[n]."""
        n = self.n
        if n == 1:
            return np.zeros(1, dtype=np.uint64)
        hb = np.uint64(self._half_bits)
        hm = np.uint64(self._half_mask)
        y = np.arange(n, dtype=np.uint64)
        out = np.empty(n, dtype=np.uint64)
        pending = np.arange(n)
        while pending.size:
            left = y >> hb
            right = y & hm
            for rk in self._round_keys:
                left, right = right, left ^ (splitmix64_np(right ^ np.uint64(rk)) & hm)
            y = (left << hb) | right
            done = y < np.uint64(n)
            out[pending[done]] = y[done]
            pending = pending[~done]
            y = y[~done]
        return out


def prp_eval(prp: Prp, x: int) -> int:
    return prp(x)


@functools.lru_cache(maxsize=128)
def _layers_cached(m: int) -> tuple:
    """Batcher odd-even mergesort comparator layers for power-of-two m.

    Each layer is a pair of index vectors (i, j) with i < j; the pairs within
    one layer are disjoint, so a layer can be applied as a single vector op.
    """
    assert m >= 1 and (m & (m - 1)) == 0
    layers = []
    p = 1
    while p < m:
        k = p
        while k >= 1:
            ii, jj = [], []
            for j in range(k % p, m - k, 2 * k):
                for i in range(min(k, m - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        ii.append(i + j)
                        jj.append(i + j + k)
            if ii:
                layers.append((np.asarray(ii, dtype=np.int64),
                               np.asarray(jj, dtype=np.int64)))
            k //= 2
        p *= 2
    return tuple(layers)


def padded_size(n: int) -> int:
    m = 1
    while m < n:
        m <<= 1
    return m


def schedule_layers(n: int):
    """Comparator layers for sorting n cells after padding to a power of two."""
    if n < 1:
        raise ValueError("schedule needs n >= 1")
    return _layers_cached(padded_size(n))


def build_schedule(n: int) -> list[tuple[int, int]]:
    """Flat comparator list; applying compare-exchange along it sorts any input."""
    pairs = []
    for ii, jj in schedule_layers(n):
        pairs.extend(zip(ii.tolist(), jj.tolist()))
    return pairs


def schedule_length(n: int) -> int:
    return sum(len(ii) for ii, _ in schedule_layers(n))
