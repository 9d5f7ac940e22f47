# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the _pykernels functions.

Ray/triangle intersection keeps the exact operation order of the numpy
fallback so both backends agree bitwise; the table kernels use real atomics
and release the GIL, so Python threads accumulate concurrently.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor
from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t

NAME = "native"

EMPTY_TAG = 0xFFFFFFFF00000000
FRESH_PRIORITY = 0xFF000000

cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>

    static inline uint64_t pf_load_u64(const uint64_t *p) {
        return __atomic_load_n(p, __ATOMIC_ACQUIRE);
    }
    static inline void pf_store_u64(uint64_t *p, uint64_t v) {
        __atomic_store_n(p, v, __ATOMIC_RELEASE);
    }
    static inline void pf_store_i64(int64_t *p, int64_t v) {
        __atomic_store_n(p, v, __ATOMIC_RELEASE);
    }
    static inline int64_t pf_load_i64(const int64_t *p) {
        return __atomic_load_n(p, __ATOMIC_ACQUIRE);
    }
    /* Returns the previous value; the swap succeeded iff it equals expected. */
    static inline uint64_t pf_cas_u64(uint64_t *p, uint64_t expected, uint64_t desired) {
        uint64_t e = expected;
        __atomic_compare_exchange_n(p, &e, desired, 0, __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE);
        return e;
    }
    static inline void pf_add_i64(int64_t *p, int64_t v) {
        __atomic_fetch_add(p, v, __ATOMIC_ACQ_REL);
    }
    static inline void pf_add_f64(double *p, double v) {
        uint64_t old_bits, new_bits;
        double d;
        do {
            old_bits = __atomic_load_n((uint64_t *)p, __ATOMIC_ACQUIRE);
            memcpy(&d, &old_bits, 8);
            d += v;
            memcpy(&new_bits, &d, 8);
        } while (!__atomic_compare_exchange_n((uint64_t *)p, &old_bits, new_bits, 0,
                                              __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE));
    }
    static inline void pf_store_f64(double *p, double v) {
        uint64_t bits;
        memcpy(&bits, &v, 8);
        __atomic_store_n((uint64_t *)p, bits, __ATOMIC_RELEASE);
    }
    """
    uint64_t pf_load_u64(const uint64_t *p) nogil
    void pf_store_u64(uint64_t *p, uint64_t v) nogil
    void pf_store_i64(int64_t *p, int64_t v) nogil
    int64_t pf_load_i64(const int64_t *p) nogil
    uint64_t pf_cas_u64(uint64_t *p, uint64_t expected, uint64_t desired) nogil
    void pf_add_i64(int64_t *p, int64_t v) nogil
    void pf_add_f64(double *p, double v) nogil
    void pf_store_f64(double *p, double v) nogil

cdef double _DET_EPS = 1e-14
cdef uint64_t _EMPTY = 0xFFFFFFFF00000000ULL
cdef uint64_t _FRESH = 0xFF000000ULL
cdef uint64_t _AGE_MASK = 0xFFFFFFULL
cdef uint64_t _FP_MASK = 0xFFFFFFFFULL

ctypedef fused sum_t:
    int64_t
    double


def intersect_closest(double[:, ::1] v0, double[:, ::1] e1, double[:, ::1] e2,
                      double[:, ::1] orig, double[:, ::1] dirs,
                      double t_min, double t_max):
    cdef Py_ssize_t n = orig.shape[0]
    cdef Py_ssize_t m = v0.shape[0]
    t_out = np.full(n, np.inf)
    i_out = np.full(n, -1, np.int64)
    cdef double[::1] tv_ = t_out
    cdef int64_t[::1] iv_ = i_out
    cdef Py_ssize_t i, k
    cdef double ox, oy, oz, dx, dy, dz
    cdef double px, py, pz, det, inv, tx, ty, tz, qx, qy, qz, u, v, t, best
    cdef int64_t best_i
    with nogil:
        for i in range(n):
            ox = orig[i, 0]; oy = orig[i, 1]; oz = orig[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            best = t_max
            best_i = -1
            for k in range(m):
                px = dy * e2[k, 2] - dz * e2[k, 1]
                py = dz * e2[k, 0] - dx * e2[k, 2]
                pz = dx * e2[k, 1] - dy * e2[k, 0]
                det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
                if det <= _DET_EPS and det >= -_DET_EPS:
                    continue
                inv = 1.0 / det
                tx = ox - v0[k, 0]; ty = oy - v0[k, 1]; tz = oz - v0[k, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0:
                    continue
                qx = ty * e1[k, 2] - tz * e1[k, 1]
                qy = tz * e1[k, 0] - tx * e1[k, 2]
                qz = tx * e1[k, 1] - ty * e1[k, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
                if t > t_min and t < best:
                    best = t
                    best_i = k
            if best_i >= 0:
                tv_[i] = best
                iv_[i] = best_i
    return t_out, i_out


def intersect_any(double[:, ::1] v0, double[:, ::1] e1, double[:, ::1] e2,
                  double[:, ::1] orig, double[:, ::1] dirs,
                  double t_min, double[::1] t_max):
    cdef Py_ssize_t n = orig.shape[0]
    cdef Py_ssize_t m = v0.shape[0]
    out = np.zeros(n, np.uint8)
    cdef uint8_t[::1] ov = out
    cdef Py_ssize_t i, k
    cdef double ox, oy, oz, dx, dy, dz, tmax
    cdef double px, py, pz, det, inv, tx, ty, tz, qx, qy, qz, u, v, t
    with nogil:
        for i in range(n):
            ox = orig[i, 0]; oy = orig[i, 1]; oz = orig[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            tmax = t_max[i]
            for k in range(m):
                px = dy * e2[k, 2] - dz * e2[k, 1]
                py = dz * e2[k, 0] - dx * e2[k, 2]
                pz = dx * e2[k, 1] - dy * e2[k, 0]
                det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
                if det <= _DET_EPS and det >= -_DET_EPS:
                    continue
                inv = 1.0 / det
                tx = ox - v0[k, 0]; ty = oy - v0[k, 1]; tz = oz - v0[k, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0:
                    continue
                qx = ty * e1[k, 2] - tz * e1[k, 1]
                qy = tz * e1[k, 0] - tx * e1[k, 2]
                qz = tx * e1[k, 1] - ty * e1[k, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
                if t > t_min and t < tmax:
                    ov[i] = 1
                    break
    return out


cdef inline void _zero_cell(sum_t[:, ::1] sums, sum_t[:, ::1] hsums,
                            int64_t[::1] cnts, int64_t[::1] hcnts,
                            double[::1] deltas, Py_ssize_t s) noexcept nogil:
    cdef Py_ssize_t c
    for c in range(3):
        if sum_t is int64_t:
            pf_store_i64(<int64_t *> &sums[s, c], 0)
            pf_store_i64(<int64_t *> &hsums[s, c], 0)
        else:
            pf_store_f64(<double *> &sums[s, c], 0.0)
            pf_store_f64(<double *> &hsums[s, c], 0.0)
    pf_store_i64(&cnts[s], 0)
    pf_store_i64(&hcnts[s], 0)
    pf_store_f64(&deltas[s], 0.0)


def _accumulate_impl(uint64_t[::1] tags, sum_t[:, ::1] sums, int64_t[::1] counts,
                     sum_t[:, ::1] hist_sums, int64_t[::1] hist_counts,
                     int64_t[::1] last_touch, double[::1] deltas,
                     uint64_t[::1] idx, uint32_t[::1] fp, double[:, ::1] vals,
                     int64_t frame, int probe_limit, int evict_min_age):
    cdef Py_ssize_t n = idx.shape[0]
    cdef uint64_t mask = <uint64_t> (tags.shape[0] - 1)
    status = np.zeros(n, np.uint8)
    slots = np.full(n, -1, np.int64)
    probe_len = np.zeros(n, np.uint8)
    victim_tags = np.zeros(n, np.uint64)
    victim_touch = np.zeros(n, np.int64)
    cdef uint8_t[::1] st_ = status
    cdef int64_t[::1] sl_ = slots
    cdef uint8_t[::1] pl_ = probe_len
    cdef uint64_t[::1] vt_ = victim_tags
    cdef int64_t[::1] vtt_ = victim_touch
    cdef Py_ssize_t i, c
    cdef int j
    cdef uint64_t home, s, tag, incoming, age, victim_tag, old
    cdef int64_t victim_slot
    cdef bint done
    with nogil:
        for i in range(n):
            home = idx[i] & mask
            incoming = (_FRESH << 32) | <uint64_t> fp[i]
            victim_slot = -1
            victim_tag = 0
            done = False
            for j in range(probe_limit):
                s = (home + <uint64_t> j) & mask
                pl_[i] = <uint8_t> (j + 1)
                tag = pf_load_u64(&tags[s])
                if tag == _EMPTY:
                    old = pf_cas_u64(&tags[s], _EMPTY, incoming)
                    if old != _EMPTY and (old & _FP_MASK) != <uint64_t> fp[i]:
                        continue  # lost the claim to a different key
                    sl_[i] = <int64_t> s
                    done = True
                    break
                if (tag & _FP_MASK) == <uint64_t> fp[i]:
                    sl_[i] = <int64_t> s
                    done = True
                    break
                age = (tag >> 32) & _AGE_MASK
                if age >= <uint64_t> evict_min_age and pf_load_i64(&counts[s]) == 0:
                    if victim_slot < 0 or tag > victim_tag:
                        victim_slot = <int64_t> s
                        victim_tag = tag
            if not done and victim_slot >= 0:
                old = pf_cas_u64(&tags[victim_slot], victim_tag, incoming)
                if old == victim_tag:
                    st_[i] = 1
                    sl_[i] = victim_slot
                    vt_[i] = victim_tag
                    vtt_[i] = pf_load_i64(&last_touch[victim_slot])
                    _zero_cell(sums, hist_sums, counts, hist_counts, deltas,
                               <Py_ssize_t> victim_slot)
                    done = True
            if not done:
                st_[i] = 2
                continue
            s = <uint64_t> sl_[i]
            for c in range(3):
                if sum_t is int64_t:
                    # 16.16 fixed point, rounded half up
                    pf_add_i64(<int64_t *> &sums[s, c],
                               <int64_t> floor(vals[i, c] * 65536.0 + 0.5))
                else:
                    pf_add_f64(<double *> &sums[s, c], vals[i, c])
            pf_add_i64(&counts[s], 1)
            pf_store_i64(&last_touch[s], frame)
    return status, slots, probe_len, victim_tags, victim_touch


def accumulate_fixed(tags, sums, counts, hist_sums, hist_counts, last_touch,
                     deltas, idx, fp, vals, frame, probe_limit, evict_min_age):
    return _accumulate_impl(tags, sums, counts, hist_sums, hist_counts,
                            last_touch, deltas, idx, fp, vals,
                            frame, probe_limit, evict_min_age)


def accumulate_float(tags, sums, counts, hist_sums, hist_counts, last_touch,
                     deltas, idx, fp, vals, frame, probe_limit, evict_min_age):
    return _accumulate_impl(tags, sums, counts, hist_sums, hist_counts,
                            last_touch, deltas, idx, fp, vals,
                            frame, probe_limit, evict_min_age)


def lookup_slots(uint64_t[::1] tags, uint64_t[::1] idx, uint32_t[::1] fp,
                 int probe_limit):
    cdef Py_ssize_t n = idx.shape[0]
    cdef uint64_t mask = <uint64_t> (tags.shape[0] - 1)
    out = np.full(n, -1, np.int64)
    cdef int64_t[::1] ov = out
    cdef Py_ssize_t i
    cdef int j
    cdef uint64_t home, s, tag
    with nogil:
        for i in range(n):
            home = idx[i] & mask
            for j in range(probe_limit):
                s = (home + <uint64_t> j) & mask
                tag = pf_load_u64(&tags[s])
                if tag == _EMPTY:
                    break
                if (tag & _FP_MASK) == <uint64_t> fp[i]:
                    ov[i] = <int64_t> s
                    break
    return out
