"""Counter-based deterministic random numbers.

Every draw is a pure function of (seed, stream tag, path id, step, dimension),
so any path can be replayed exactly without storing generator state.  The
mixing function is the 64-bit murmur3 finalizer applied after absorbing each
field; uniform doubles use the top 53 bits.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_M1 = 0xFF51AFD7ED558CCD
_M2 = 0xC4CEB9FE1A85EC53
_GOLDEN = 0x9E3779B97F4A7C15

# Stream tags keep unrelated consumers of the same (seed, path) apart.
STREAM_TRACE = 1
STREAM_JITTER_ACCUM = 2
STREAM_JITTER_LOOKUP = 3

_INV_2_53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    """murmur3 fmix64 on a Python int, wrapping at 64 bits."""
    x &= _MASK
    x ^= x >> 33
    x = (x * _M1) & _MASK
    x ^= x >> 33
    x = (x * _M2) & _MASK
    x ^= x >> 33
    return x


def draw_u64(seed: int, stream: int, a: int, b: int, c: int) -> int:
    """One 64-bit draw for counter fields (a, b, c)."""
    h = mix64((seed & _MASK) ^ (stream * _GOLDEN))
    h = mix64(h ^ ((a + _GOLDEN) & _MASK))
    h = mix64(h ^ ((b + _GOLDEN) & _MASK))
    h = mix64(h ^ ((c + _GOLDEN) & _MASK))
    return h


def draw_unit(seed: int, stream: int, a: int, b: int, c: int) -> float:
    """Uniform double in [0, 1)."""
    return (draw_u64(seed, stream, a, b, c) >> 11) * _INV_2_53


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over uint64 arrays (wraparound is intentional)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(33)
    x *= np.uint64(_M1)
    x ^= x >> np.uint64(33)
    x *= np.uint64(_M2)
    x ^= x >> np.uint64(33)
    return x


def draw_u64_array(seed: int, stream: int, a, b, c) -> np.ndarray:
    """Vectorized draw_u64; a, b, c broadcast against each other."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    c = np.asarray(c, dtype=np.uint64)
    g = np.uint64(_GOLDEN)
    h0 = np.uint64(mix64((seed & _MASK) ^ ((stream * _GOLDEN) & _MASK)))
    h = mix64_array(h0 ^ (a + g))
    h = mix64_array(h ^ (b + g))
    h = mix64_array(h ^ (c + g))
    return h


def draw_unit_array(seed: int, stream: int, a, b, c) -> np.ndarray:
    """Vectorized uniform doubles in [0, 1)."""
    h = draw_u64_array(seed, stream, a, b, c)
    return (h >> np.uint64(11)).astype(np.float64) * _INV_2_53
