# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled projection and counter-based sampling kernels.

Must stay operation-for-operation identical to ``_kernels_py.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND = "cython"


cdef inline double _clip01(double t) nogil:
    if t < 0.0:
        return 0.0
    elif t > 1.0:
        return 1.0
    return t


cdef double _clipped_sum(const double[::1] v, Py_ssize_t n, double shift) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += _clip01(v[i] - shift)
    return s


cdef void _clip_shift(const double[::1] v, Py_ssize_t n, double shift, double[::1] out) nogil:
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = _clip01(v[i] - shift)


cdef int _bisect(const double[::1] v, Py_ssize_t n, double target, double lo, double hi,
                 double tol, int max_iters, double[::1] out) nogil:
    cdef double mid, s
    cdef int it
    for it in range(max_iters):
        mid = 0.5 * (lo + hi)
        s = _clipped_sum(v, n, mid)
        if fabs(s - target) <= tol:
            _clip_shift(v, n, mid, out)
            return 0
        if s > target:
            lo = mid
        else:
            hi = mid
    _clip_shift(v, n, 0.5 * (lo + hi), out)
    return 1


def project_c1(point, double k, double tol, int max_iters):
    cdef const double[::1] v = np.ascontiguousarray(point, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double hi
    cdef int status
    if _clipped_sum(v, n, 0.0) <= k:
        _clip_shift(v, n, 0.0, o)
        return out, 0
    hi = v[0]
    for i in range(1, n):
        if v[i] > hi:
            hi = v[i]
    with nogil:
        status = _bisect(v, n, k, 0.0, hi, tol, max_iters, o)
    return out, status


cdef int _project_c2_into(const double[::1] v, Py_ssize_t n, double tol, int max_iters,
                          double[::1] out) nogil:
    cdef double lo, hi
    cdef Py_ssize_t i
    if n == 1:
        out[0] = 1.0
        return 0
    lo = v[0]
    hi = v[0]
    for i in range(1, n):
        if v[i] < lo:
            lo = v[i]
        if v[i] > hi:
            hi = v[i]
    return _bisect(v, n, 1.0, lo - 1.0, hi, tol, max_iters, out)


def project_c2(point, double tol, int max_iters):
    cdef const double[::1] v = np.ascontiguousarray(point, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef int status
    with nogil:
        status = _project_c2_into(v, n, tol, max_iters, o)
    return out, status


def project_c2_rows(rows, counts, double tol, int max_iters):
    cdef const double[:, ::1] r = np.ascontiguousarray(rows, dtype=np.float64)
    cdef const long[::1] c = np.ascontiguousarray(counts, dtype=np.int_)
    out = np.zeros((r.shape[0], r.shape[1]))
    cdef double[:, ::1] o = out
    cdef int status = 0
    cdef Py_ssize_t i
    with nogil:
        for i in range(r.shape[0]):
            if c[i] > 0:
                status |= _project_c2_into(r[i, :c[i]], c[i], tol, max_iters, o[i, :c[i]])
    return out, status


cdef inline uint64_t _splitmix64(uint64_t x) nogil:
    cdef uint64_t z = x + <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64(x):
    return int(_splitmix64(<uint64_t>(int(x) & 0xFFFFFFFFFFFFFFFF)))


def uniform_block(keys, Py_ssize_t n):
    cdef const uint64_t[::1] k = np.ascontiguousarray(keys, dtype=np.uint64).reshape(-1)
    cdef Py_ssize_t nk = k.shape[0], r, j
    out = np.empty((nk, n))
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(nk):
            for j in range(n):
                o[r, j] = <double>(_splitmix64(k[r] ^ _splitmix64(<uint64_t>j)) >> 11) * (1.0 / 9007199254740992.0)
    return out
