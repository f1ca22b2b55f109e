# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the retrieval and KDE kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, M_PI

cnp.import_array()


cdef inline bint _before(double da, Py_ssize_t pa, double db, Py_ssize_t pb) noexcept nogil:
    return da < db or (da == db and pa < pb)


def nearest_pool(const double[:, ::1] features, candidates, const double[::1] query,
                 Py_ssize_t pool_size):
    cdef const long long[::1] cand = np.ascontiguousarray(candidates, dtype=np.int64)
    cdef Py_ssize_t n = cand.shape[0]
    cdef Py_ssize_t d = features.shape[1]
    cdef Py_ssize_t k = pool_size if pool_size < n else n
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    cdef double[::1] best_d = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t[::1] best_p = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t i, j, filled = 0
    cdef long long row
    cdef double acc, diff
    with nogil:
        for i in range(n):
            row = cand[i]
            acc = 0.0
            for j in range(d):
                diff = features[row, j] - query[j]
                acc = acc + diff * diff
            if filled == k and not _before(acc, i, best_d[k - 1], best_p[k - 1]):
                continue
            # insertion into the sorted top-k buffer
            j = filled if filled < k else k - 1
            while j > 0 and _before(acc, i, best_d[j - 1], best_p[j - 1]):
                best_d[j] = best_d[j - 1]
                best_p[j] = best_p[j - 1]
                j -= 1
            best_d[j] = acc
            best_p[j] = i
            if filled < k:
                filled += 1
    out = np.empty(k, dtype=np.int64)
    cdef long long[::1] o = out
    for i in range(k):
        o[i] = cand[best_p[i]]
    return out


def kde_density(points, residuals, double bandwidth):
    pts = np.asarray(points, dtype=np.float64)
    # ascontiguousarray would promote a 0-d input to 1-d
    cdef const double[::1] flat = np.ascontiguousarray(pts.ravel())
    cdef const double[::1] res = np.ascontiguousarray(residuals, dtype=np.float64)
    out = np.empty(flat.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j, n = res.shape[0]
    cdef double norm = 1.0 / (n * bandwidth * sqrt(2.0 * M_PI))
    cdef double acc, u
    with nogil:
        for i in range(flat.shape[0]):
            acc = 0.0
            for j in range(n):
                u = (flat[i] - res[j]) / bandwidth
                acc = acc + exp(-0.5 * u * u)
            o[i] = acc * norm
    return out.reshape(pts.shape)
