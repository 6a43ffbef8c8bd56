"""Fenwick (binary indexed) tree over per-edge rates.

Gives O(log L) rate updates and O(log L) inverse-CDF event selection,
which is what keeps the event loop cheap when a move only changes the
three neighbouring edge rates.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def fenwick_build(values):
    """Tree (1-indexed, length n+1) holding the prefix sums of values."""
    n = values.shape[0]
    tree = np.zeros(n + 1, dtype=np.float64)
    for i in range(n):
        fenwick_add(tree, n, i, values[i])
    return tree


@njit(cache=True, inline="always")
def fenwick_add(tree, n, i, delta):
    i += 1
    while i <= n:
        tree[i] += delta
        i += i & (-i)


@njit(cache=True)
def fenwick_prefix(tree, i):
    """Sum of values[0..i] inclusive."""
    s = 0.0
    i += 1
    while i > 0:
        s += tree[i]
        i -= i & (-i)
    return s


@njit(cache=True, inline="always")
def fenwick_find(tree, n, bitmask, target):
    """Smallest index i with prefix(i) > target (target in [0, total))."""
    pos = 0
    rem = target
    bit = bitmask
    while bit:
        nxt = pos + bit
        if nxt <= n and tree[nxt] <= rem:
            rem -= tree[nxt]
            pos = nxt
        bit >>= 1
    return pos


@njit(cache=True, inline="always")
def top_bit(n):
    """Largest power of two <= n."""
    b = 1
    while (b << 1) <= n:
        b <<= 1
    return b
