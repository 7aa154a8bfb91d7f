# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: attention retrieval, merge-candidate scan, and the
clipped window sums/maxima used by refinement.

Contracts match ``_kernels_py``; loops accumulate in double precision and run
in a fixed order, so results are reproducible regardless of caller threading.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, sqrt

cnp.import_array()

BACKEND = "compiled"


def attention_retrieve(const float[:, ::1] query_keys,
                       const float[:, ::1] bank_keys,
                       const float[:, ::1] bank_values,
                       double eps_l):
    cdef Py_ssize_t p = query_keys.shape[0]
    cdef Py_ssize_t dk = query_keys.shape[1]
    cdef Py_ssize_t n = bank_keys.shape[0]
    cdef Py_ssize_t dv = bank_values.shape[1]

    retrieved_arr = np.empty((p, dv), dtype=np.float32)
    counts_arr = np.zeros(n, dtype=np.int64)
    logits_arr = np.empty(n, dtype=np.float64)
    acc_arr = np.empty(dv, dtype=np.float64)

    cdef float[:, ::1] retrieved = retrieved_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef double[::1] logits = logits_arr
    cdef double[::1] acc = acc_arr

    cdef Py_ssize_t i, j, c
    cdef double dot, mx, total, w

    with nogil:
        for i in range(p):
            mx = -INFINITY
            for j in range(n):
                dot = 0.0
                for c in range(dk):
                    dot += <double>query_keys[i, c] * <double>bank_keys[j, c]
                logits[j] = dot
                if dot > mx:
                    mx = dot
            total = 0.0
            for j in range(n):
                logits[j] = exp(logits[j] - mx)
                total += logits[j]
            for c in range(dv):
                acc[c] = 0.0
            for j in range(n):
                w = logits[j] / total
                if w > eps_l:
                    counts[j] += 1
                for c in range(dv):
                    acc[c] += w * <double>bank_values[j, c]
            for c in range(dv):
                retrieved[i, c] = <float>acc[c]

    return retrieved_arr, counts_arr


def cosine_best_match(const float[:, ::1] new_keys, const float[:, ::1] bank_keys):
    cdef Py_ssize_t m = new_keys.shape[0]
    cdef Py_ssize_t d = new_keys.shape[1]
    cdef Py_ssize_t n = bank_keys.shape[0]

    idx_arr = np.full(m, -1, dtype=np.int64)
    best_arr = np.full(m, -INFINITY, dtype=np.float64)
    if n == 0 or m == 0:
        return idx_arr, best_arr

    norms_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] best = best_arr
    cdef double[::1] norms = norms_arr

    cdef Py_ssize_t i, j, c
    cdef double acc, nn, cosv

    with nogil:
        for j in range(n):
            acc = 0.0
            for c in range(d):
                acc += <double>bank_keys[j, c] * <double>bank_keys[j, c]
            norms[j] = sqrt(acc)
        for i in range(m):
            acc = 0.0
            for c in range(d):
                acc += <double>new_keys[i, c] * <double>new_keys[i, c]
            nn = sqrt(acc)
            if nn == 0.0:
                continue
            for j in range(n):
                if norms[j] == 0.0:
                    continue
                acc = 0.0
                for c in range(d):
                    acc += <double>new_keys[i, c] * <double>bank_keys[j, c]
                cosv = acc / (nn * norms[j])
                if cosv > best[i]:
                    best[i] = cosv
                    idx[i] = j

    return idx_arr, best_arr


def box_sum(const double[:, ::1] arr, int radius):
    """Clipped-window sums via the same prefix-sum scheme as the numpy path."""
    cdef Py_ssize_t h = arr.shape[0]
    cdef Py_ssize_t w = arr.shape[1]
    ps_arr = np.zeros((h + 1, w + 1), dtype=np.float64)
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] ps = ps_arr
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t y, x, y0, y1, x0, x1
    with nogil:
        for y in range(h):
            for x in range(w):
                ps[y + 1, x + 1] = arr[y, x] + ps[y, x + 1] + ps[y + 1, x] - ps[y, x]
        for y in range(h):
            y0 = y - radius
            if y0 < 0:
                y0 = 0
            y1 = y + radius + 1
            if y1 > h:
                y1 = h
            for x in range(w):
                x0 = x - radius
                if x0 < 0:
                    x0 = 0
                x1 = x + radius + 1
                if x1 > w:
                    x1 = w
                out[y, x] = ps[y1, x1] - ps[y0, x1] - ps[y1, x0] + ps[y0, x0]
    return out_arr


def window_max(const double[:, ::1] arr, int radius):
    """Clipped-window maxima, separable row then column passes."""
    cdef Py_ssize_t h = arr.shape[0]
    cdef Py_ssize_t w = arr.shape[1]
    tmp_arr = np.empty((h, w), dtype=np.float64)
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t y, x, k, lo, hi
    cdef double m
    with nogil:
        for y in range(h):
            for x in range(w):
                lo = x - radius
                if lo < 0:
                    lo = 0
                hi = x + radius + 1
                if hi > w:
                    hi = w
                m = arr[y, lo]
                for k in range(lo + 1, hi):
                    if arr[y, k] > m:
                        m = arr[y, k]
                tmp[y, x] = m
        for y in range(h):
            lo = y - radius
            if lo < 0:
                lo = 0
            hi = y + radius + 1
            if hi > h:
                hi = h
            for x in range(w):
                m = tmp[lo, x]
                for k in range(lo + 1, hi):
                    if tmp[k, x] > m:
                        m = tmp[k, x]
                out[y, x] = m
    return out_arr
