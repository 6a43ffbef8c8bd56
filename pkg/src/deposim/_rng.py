"""Counter-based random number streams for reproducible replica fan-out.

Each replica gets its own xoshiro256++ state derived statelessly from
(master_seed, stream_index) through splitmix64, so results do not depend
on thread scheduling or on how many replicas run concurrently.
"""
from __future__ import annotations

import numpy as np
from numba import njit, uint64

U64 = np.uint64
_GOLDEN = U64(0x9E3779B97F4A7C15)


@njit(cache=True)
def _splitmix64(x):
    x = uint64(x + uint64(0x9E3779B97F4A7C15))
    z = x
    z = uint64((z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9))
    z = uint64((z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB))
    return uint64(z ^ (z >> uint64(31))), x


@njit(cache=True)
def make_state(master_seed, stream):
    """Derive a fresh xoshiro256++ state for (master_seed, stream)."""
    s = np.empty(4, dtype=np.uint64)
    x = uint64(uint64(master_seed) ^ (uint64(stream) * uint64(0x9E3779B97F4A7C15)))
    for i in range(4):
        v, x = _splitmix64(x)
        s[i] = v
    # xoshiro must not start from the all-zero state
    if s[0] == uint64(0) and s[1] == uint64(0) and s[2] == uint64(0) and s[3] == uint64(0):
        s[0] = uint64(0x9E3779B97F4A7C15)
    return s


@njit(cache=True, inline="always")
def _rotl(x, k):
    return uint64((x << uint64(k)) | (x >> uint64(64 - k)))


@njit(cache=True, inline="always")
def next_u64(s):
    result = uint64(_rotl(uint64(s[0] + s[3]), 23) + s[0])
    t = uint64(s[1] << uint64(17))
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True, inline="always")
def uniform01(s):
    """Uniform double in [0, 1) with 53 random bits."""
    return np.float64(next_u64(s) >> uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def exponential(s, rate):
    """Exp(rate) waiting time; uses U in (0, 1] so log never sees zero."""
    return -np.log(1.0 - uniform01(s)) / rate


@njit(cache=True, inline="always")
def randint_below(s, n):
    """Uniform integer in [0, n). Modulo bias is < 2**-53 for our n."""
    return np.int64(uniform01(s) * n) % n


@njit(cache=True)
def sample_cdf(s, cdf):
    """Inverse-CDF draw: smallest index k with cdf[k] > U."""
    u = uniform01(s)
    lo = 0
    hi = len(cdf) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo
