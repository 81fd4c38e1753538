# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense kernels: Cholesky, triangular solves, pairwise distances.

Every function here has a twin in ``_pykernels`` with the same signature and
the same operation order where it matters for reproducibility.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite

cnp.import_array()

BACKEND = "cython"


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    # four independent accumulators let the CPU overlap the multiply-adds
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t k = 0
    while k + 4 <= n:
        s0 += a[k] * b[k]
        s1 += a[k + 1] * b[k + 1]
        s2 += a[k + 2] * b[k + 2]
        s3 += a[k + 3] * b[k + 3]
        k += 4
    while k < n:
        s0 += a[k] * b[k]
        k += 1
    return (s0 + s1) + (s2 + s3)


def cholesky_lower(const double[:, ::1] a, double jitter):
    """Factor ``a + jitter*I`` into a lower-triangular L.

    Returns ``(L, info)`` where ``info`` is 0 on success and ``k+1`` if the
    k-th pivot was not strictly positive (L is then incomplete).
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, d
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] L = out
    for j in range(n):
        s = a[j, j] + jitter - _dot(&L[j, 0], &L[j, 0], j)
        if not (s > 0.0) or not isfinite(s):
            return out, j + 1
        d = sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            L[i, j] = (a[i, j] - _dot(&L[i, 0], &L[j, 0], j)) / d
    return out, 0


def solve_lower(const double[:, ::1] L, const double[:, ::1] b):
    """Forward substitution: solve L x = b for every column of b."""
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t r = b.shape[1]
    cdef Py_ssize_t i, k, c
    cdef double s
    out = np.empty((n, r), dtype=np.float64)
    cdef double[:, ::1] x = out
    for c in range(r):
        for i in range(n):
            s = b[i, c]
            for k in range(i):
                s -= L[i, k] * x[k, c]
            x[i, c] = s / L[i, i]
    return out


def solve_lower_t(const double[:, ::1] L, const double[:, ::1] b):
    """Back substitution with the transpose: solve L^T x = b."""
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t r = b.shape[1]
    cdef Py_ssize_t i, k, c
    cdef double s
    out = np.empty((n, r), dtype=np.float64)
    cdef double[:, ::1] x = out
    for c in range(r):
        for i in range(n - 1, -1, -1):
            s = b[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * x[k, c]
            x[i, c] = s / L[i, i]
    return out


def sq_dists(const double[:, ::1] a, const double[:, ::1] b):
    """Pairwise squared Euclidean distances, computed by explicit differences."""
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t f = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, t
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] d = out
    for i in range(na):
        for j in range(nb):
            s = 0.0
            for k in range(f):
                t = a[i, k] - b[j, k]
                s += t * t
            d[i, j] = s
    return out
