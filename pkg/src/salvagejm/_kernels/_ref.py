"""Pure-numpy reference implementation of the basis kernels.

Same contract as the Cython module ``_fast``: callers guarantee that all
evaluation points lie inside the closed knot domain and that the knot vector
is clamped (first/last knot repeated degree+1 times).
"""

import numpy as np

BACKEND = "python"


def find_spans(ts, knots, degree):
    """Knot-span index for each point, right-closed at the upper boundary."""
    nbasis = knots.shape[0] - degree - 1
    spans = np.searchsorted(knots, ts, side="right") - 1
    return np.clip(spans, degree, nbasis - 1)


def _raw_basis(ts, spans, knots, degree):
    """Nonzero basis values at each point via the Cox-de Boor recursion.

    Returns an (n, degree+1) array; column r holds the value of basis
    function ``spans - degree + r``.
    """
    n = ts.shape[0]
    values = np.zeros((n, degree + 1))
    values[:, 0] = 1.0
    left = np.empty((n, degree + 1))
    right = np.empty((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = ts - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - ts
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = values[:, r] / denom
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved
    return values


def design_matrix(ts, knots, degree, deriv=0):
    """Dense B-spline design matrix (values or first derivatives).

    ts : (n,) float64, points inside [knots[0], knots[-1]]
    knots : clamped knot vector
    deriv : 0 for values, 1 for first derivatives
    """
    ts = np.ascontiguousarray(ts, dtype=np.float64)
    nbasis = knots.shape[0] - degree - 1
    n = ts.shape[0]
    out = np.zeros((n, nbasis))
    if n == 0:
        return out
    spans = find_spans(ts, knots, degree)
    rows = np.arange(n)[:, None]
    if deriv == 0:
        values = _raw_basis(ts, spans, knots, degree)
        cols = spans[:, None] - degree + np.arange(degree + 1)[None, :]
        out[rows, cols] = values
        return out
    if degree == 0:
        return out
    # derivative from the degree-1 lower basis:
    # B'_{i,p} = p * (N_{i,p-1}/(t_{i+p}-t_i) - N_{i+1,p-1}/(t_{i+p+1}-t_{i+1}))
    # where the lower basis nonzero block covers indices spans-(p-1) .. spans,
    # so for i = spans - p + r the two lower columns are r-1 and r.
    low = _raw_basis(ts, spans, knots, degree - 1)
    p = degree
    idx = np.arange(n)
    for r in range(degree + 1):
        i = spans - degree + r
        term = np.zeros(n)
        if r >= 1:
            d1 = knots[i + p] - knots[i]
            m = d1 > 0
            term[m] += low[m, r - 1] / d1[m]
        if r <= degree - 1:
            d2 = knots[i + p + 1] - knots[i + 1]
            m = d2 > 0
            term[m] -= low[m, r] / d2[m]
        out[idx, i] = p * term
    return out
