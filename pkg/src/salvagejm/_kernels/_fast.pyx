# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython implementation of the B-spline basis kernels.

Contract matches ``_ref``: callers guarantee in-domain points and a clamped
knot vector.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _find_span(const double* knots, Py_ssize_t nknots,
                                  int degree, Py_ssize_t nbasis, double t) noexcept nogil:
    cdef Py_ssize_t lo = degree
    cdef Py_ssize_t hi = nbasis
    cdef Py_ssize_t mid
    # right-closed at the upper boundary: last span for t == knots[nknots-1]
    if t >= knots[nbasis]:
        return nbasis - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if knots[mid] <= t:
            if knots[mid + 1] > t:
                return mid
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline void _basis_funs(const double* knots, Py_ssize_t span, double t,
                             int degree, double* values, double* left,
                             double* right) noexcept nogil:
    cdef Py_ssize_t j, r
    cdef double saved, temp
    values[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = t - knots[span + 1 - j]
        right[j] = knots[span + j] - t
        saved = 0.0
        for r in range(j):
            temp = values[r] / (right[r + 1] + left[j - r])
            values[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        values[j] = saved


def find_spans(ts, knots, int degree):
    """Knot-span index for each point, right-closed at the upper boundary."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ts_ = np.ascontiguousarray(ts, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] kn = np.ascontiguousarray(knots, dtype=np.float64)
    cdef Py_ssize_t n = ts_.shape[0]
    cdef Py_ssize_t nbasis = kn.shape[0] - degree - 1
    cdef cnp.ndarray[cnp.intp_t, ndim=1] out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = _find_span(&kn[0], kn.shape[0], degree, nbasis, ts_[i])
    return out


def design_matrix(ts, knots, int degree, int deriv=0):
    """Dense B-spline design matrix (values or first derivatives)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ts_ = np.ascontiguousarray(ts, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] kn = np.ascontiguousarray(knots, dtype=np.float64)
    cdef Py_ssize_t n = ts_.shape[0]
    cdef Py_ssize_t nknots = kn.shape[0]
    cdef Py_ssize_t nbasis = nknots - degree - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, nbasis))
    if n == 0:
        return out
    cdef double[64] values
    cdef double[64] low
    cdef double[64] left
    cdef double[64] right
    cdef Py_ssize_t i, span, bi
    cdef int r
    cdef double t, d1, d2, term
    if degree > 60:
        raise ValueError("degree too large for fixed work buffers")
    with nogil:
        for i in range(n):
            t = ts_[i]
            span = _find_span(&kn[0], nknots, degree, nbasis, t)
            if deriv == 0:
                _basis_funs(&kn[0], span, t, degree, values, left, right)
                for r in range(degree + 1):
                    out[i, span - degree + r] = values[r]
            else:
                if degree == 0:
                    continue
                _basis_funs(&kn[0], span, t, degree - 1, low, left, right)
                for r in range(degree + 1):
                    bi = span - degree + r
                    term = 0.0
                    if r >= 1:
                        d1 = kn[bi + degree] - kn[bi]
                        if d1 > 0:
                            term += low[r - 1] / d1
                    if r <= degree - 1:
                        d2 = kn[bi + degree + 1] - kn[bi + 1]
                        if d2 > 0:
                            term -= low[r] / d2
                    out[i, bi] = degree * term
    return out
