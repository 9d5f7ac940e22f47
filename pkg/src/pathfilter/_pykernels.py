"""Numpy fallback for the hot kernels.

Same contracts as the compiled module `pathfilter._native`: ray/triangle
batches for the tracer and probing loops for the voxel table.  Table mutation
is guarded by a lock so concurrent callers stay correct (the compiled kernels
use real atomics instead).
"""

from __future__ import annotations

import threading

import numpy as np

NAME = "python"

_DET_EPS = 1e-14

_lock = threading.Lock()

# table tag layout (shared contract with _native; see table.py for the docs)
EMPTY_TAG = 0xFFFFFFFF00000000
FRESH_PRIORITY = 0xFF000000
_AGE_MASK = 0xFFFFFF


def intersect_closest(v0, e1, e2, orig, dirs, t_min, t_max):
    """Nearest hit per ray: returns (t, triangle index); index -1 on miss.

    Ties on t keep the lowest triangle index, matching the compiled kernel.
    """
    n = orig.shape[0]
    m = v0.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, np.int64)
    if n == 0 or m == 0:
        return best_t, best_i
    # chunk triangles to bound the (rays x tris) temporaries
    step = max(1, int(4_000_000 // max(n, 1)))
    for lo in range(0, m, step):
        hi = min(m, lo + step)
        cv0, ce1, ce2 = v0[lo:hi], e1[lo:hi], e2[lo:hi]
        p = np.cross(dirs[:, None, :], ce2[None, :, :])
        det = np.einsum("kj,nkj->nk", ce1, p)
        valid = np.abs(det) > _DET_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = orig[:, None, :] - cv0[None, :, :]
            u = np.einsum("nkj,nkj->nk", tv, p) * inv
            q = np.cross(tv, ce1[None, :, :])
            v = np.einsum("nj,nkj->nk", dirs, q) * inv
            t = np.einsum("kj,nkj->nk", ce2, q) * inv
        hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        hit &= (t > t_min) & (t < t_max)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n), k]
        better = tk < best_t
        best_t[better] = tk[better]
        best_i[better] = k[better] + lo
    return best_t, best_i


def intersect_any(v0, e1, e2, orig, dirs, t_min, t_max):
    """Occlusion test per ray with per-ray t_max; returns uint8 flags."""
    n = orig.shape[0]
    m = v0.shape[0]
    out = np.zeros(n, np.uint8)
    if n == 0 or m == 0:
        return out
    step = max(1, int(4_000_000 // max(n, 1)))
    for lo in range(0, m, step):
        hi = min(m, lo + step)
        cv0, ce1, ce2 = v0[lo:hi], e1[lo:hi], e2[lo:hi]
        p = np.cross(dirs[:, None, :], ce2[None, :, :])
        det = np.einsum("kj,nkj->nk", ce1, p)
        valid = np.abs(det) > _DET_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = orig[:, None, :] - cv0[None, :, :]
            u = np.einsum("nkj,nkj->nk", tv, p) * inv
            q = np.cross(tv, ce1[None, :, :])
            v = np.einsum("nj,nkj->nk", dirs, q) * inv
            t = np.einsum("kj,nkj->nk", ce2, q) * inv
        hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        hit &= (t > t_min) & (t < t_max[:, None])
        out |= hit.any(axis=1).astype(np.uint8)
    return out


def _probe_insert(tags, counts, mask, idx, fp, probe_limit, evict_min_age):
    """Shared probe walk: find the slot for (idx, fp), claiming or evicting.

    Returns (slot, status, probe_len, victim_tag): status 0 accumulated,
    1 evicted first, 2 probe window exhausted (no mutation).
    """
    home = idx & mask
    incoming = (FRESH_PRIORITY << 32) | fp
    victim_slot = -1
    victim_tag = 0
    probes = 0
    for j in range(probe_limit):
        s = (home + j) & mask
        probes = j + 1
        tag = int(tags[s])
        if tag == EMPTY_TAG:
            tags[s] = incoming
            return s, 0, probes, 0
        if (tag & 0xFFFFFFFF) == fp:
            return s, 0, probes, 0
        age = (tag >> 32) & _AGE_MASK
        if age >= evict_min_age and counts[s] == 0:
            if victim_slot < 0 or tag > victim_tag:
                victim_slot = s
                victim_tag = tag
    if victim_slot >= 0:
        tags[victim_slot] = incoming
        return victim_slot, 1, probes, victim_tag
    return -1, 2, probes, 0


def _accumulate(table_arrays, idx, fp, vals, frame, probe_limit, evict_min_age,
                fixed: bool):
    tags, sums, cnts, hsums, hcnts, touch, deltas = table_arrays
    n = len(idx)
    mask = len(tags) - 1
    status = np.zeros(n, np.uint8)
    slots = np.full(n, -1, np.int64)
    probe_len = np.zeros(n, np.uint8)
    victim_tags = np.zeros(n, np.uint64)
    victim_touch = np.zeros(n, np.int64)
    if fixed:
        # 16.16 fixed point, rounded half up (same formula as the native kernel)
        vals = np.floor(vals * 65536.0 + 0.5).astype(np.int64)
    with _lock:
        for i in range(n):
            s, st, pl, vt = _probe_insert(tags, cnts, mask, int(idx[i]), int(fp[i]),
                                          probe_limit, evict_min_age)
            status[i] = st
            probe_len[i] = pl
            if st == 2:
                continue
            slots[i] = s
            if st == 1:
                victim_tags[i] = vt
                victim_touch[i] = touch[s]
                sums[s] = 0
                hsums[s] = 0
                cnts[s] = 0
                hcnts[s] = 0
                deltas[s] = 0.0
            sums[s] += vals[i]
            cnts[s] += 1
            touch[s] = frame
    return status, slots, probe_len, victim_tags, victim_touch


def accumulate_fixed(tags, sums, counts, hist_sums, hist_counts, last_touch,
                     deltas, idx, fp, vals, frame, probe_limit, evict_min_age):
    return _accumulate((tags, sums, counts, hist_sums, hist_counts, last_touch,
                        deltas), idx, fp, vals, frame, probe_limit, evict_min_age,
                       fixed=True)


def accumulate_float(tags, sums, counts, hist_sums, hist_counts, last_touch,
                     deltas, idx, fp, vals, frame, probe_limit, evict_min_age):
    return _accumulate((tags, sums, counts, hist_sums, hist_counts, last_touch,
                        deltas), idx, fp, vals, frame, probe_limit, evict_min_age,
                       fixed=False)


def lookup_slots(tags, idx, fp, probe_limit):
    """Slot of the matching fingerprint per query, -1 when absent.

    Stops at the first empty slot: linear probing never leaves a reachable
    entry beyond a hole within one generation.
    """
    n = len(idx)
    mask = len(tags) - 1
    out = np.full(n, -1, np.int64)
    for i in range(n):
        home = int(idx[i]) & mask
        f = int(fp[i])
        for j in range(probe_limit):
            s = (home + j) & mask
            tag = int(tags[s])
            if tag == EMPTY_TAG:
                break
            if (tag & 0xFFFFFFFF) == f:
                out[i] = s
                break
    return out
