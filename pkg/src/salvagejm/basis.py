"""B-spline bases: values, derivatives, exact integrals, difference penalties.

Bases are clamped (boundary knots repeated degree+1 times), so the dimension
is ``len(internal_knots) + degree + 1`` and the basis sums to one on the
closed domain. Evaluation at the upper boundary returns the left-limit values
(right-closed convention). There is no extrapolation: points outside the
boundary knots raise :class:`SplineDomainError`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

__all__ = [
    "SplineConfig",
    "PenaltyMatrix",
    "SplineDomainError",
    "bspline_basis",
    "bspline_deriv",
    "bspline_integral",
    "basis_matrix",
    "basis_deriv_matrix",
    "basis_integral_matrix",
    "difference_penalty",
]


class SplineDomainError(ValueError):
    """Raised when an evaluation point lies outside the boundary knots."""


@dataclass(frozen=True)
class SplineConfig:
    """Clamped B-spline configuration on a closed time domain (years)."""

    degree: int
    internal_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        lo, hi = self.boundary_knots
        if not lo < hi:
            raise ValueError("boundary knots must satisfy lo < hi")
        internal = tuple(float(v) for v in self.internal_knots)
        object.__setattr__(self, "internal_knots", internal)
        object.__setattr__(self, "boundary_knots", (float(lo), float(hi)))
        if internal:
            if not (lo < internal[0] and internal[-1] < hi):
                raise ValueError("internal knots must lie strictly inside the boundary")
            if any(a > b for a, b in zip(internal, internal[1:])):
                raise ValueError("internal knots must be nondecreasing")

    @property
    def dim(self) -> int:
        return len(self.internal_knots) + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.concatenate(
            [
                np.full(self.degree + 1, lo),
                np.asarray(self.internal_knots, dtype=float),
                np.full(self.degree + 1, hi),
            ]
        )

    def contains(self, t) -> bool:
        lo, hi = self.boundary_knots
        return bool(np.all((np.asarray(t) >= lo) & (np.asarray(t) <= hi)))


@dataclass(frozen=True)
class PenaltyMatrix:
    """r-th order difference penalty K = D_r' D_r with rank Q - r."""

    matrix: np.ndarray = field(repr=False)
    order: int
    rank: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _check_domain(ts, cfg: SplineConfig):
    lo, hi = cfg.boundary_knots
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if ts.size and (ts.min() < lo or ts.max() > hi):
        raise SplineDomainError(
            f"evaluation points outside spline domain [{lo}, {hi}]"
        )
    return ts


def basis_matrix(ts, cfg: SplineConfig) -> np.ndarray:
    """Basis values at each point; shape (len(ts), cfg.dim)."""
    ts = _check_domain(ts, cfg)
    return _kernels.design_matrix(ts, cfg.knots, cfg.degree, 0)


def basis_deriv_matrix(ts, cfg: SplineConfig) -> np.ndarray:
    """Analytic first derivatives at each point; shape (len(ts), cfg.dim)."""
    ts = _check_domain(ts, cfg)
    return _kernels.design_matrix(ts, cfg.knots, cfg.degree, 1)


def bspline_basis(t: float, cfg: SplineConfig) -> np.ndarray:
    """All basis values at a single time t (Cox-de Boor recursion)."""
    return basis_matrix([t], cfg)[0]


def bspline_deriv(t: float, cfg: SplineConfig, order: int = 1) -> np.ndarray:
    """Analytic first derivative of each basis function at t."""
    if order != 1:
        raise ValueError("only first derivatives are supported")
    return basis_deriv_matrix([t], cfg)[0]


# Gauss-Legendre nodes/weights on [-1, 1] by point count; n points are exact
# through polynomial degree 2n-1, so degree//2 + 1 points integrate each
# spline piece exactly.
_GL = {
    1: (np.array([0.0]), np.array([2.0])),
    2: (
        np.array([-0.5773502691896257645091488, 0.5773502691896257645091488]),
        np.array([1.0, 1.0]),
    ),
    3: (
        np.array([-0.7745966692414833770358531, 0.0, 0.7745966692414833770358531]),
        np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]),
    ),
    4: (
        np.array(
            [
                -0.8611363115940525752239465,
                -0.3399810435848562648026658,
                0.3399810435848562648026658,
                0.8611363115940525752239465,
            ]
        ),
        np.array(
            [
                0.3478548451374538573730639,
                0.6521451548625461426269361,
                0.6521451548625461426269361,
                0.3478548451374538573730639,
            ]
        ),
    ),
}


def bspline_integral(t0: float, t1: float, cfg: SplineConfig) -> np.ndarray:
    """Exact integral of each basis function over [t0, t1].

    Piecewise Gauss-Legendre split at the knots, with enough nodes per piece
    to integrate degree-``cfg.degree`` polynomials exactly.
    """
    return basis_integral_matrix([(t0, t1)], cfg)[0]


def basis_integral_matrix(intervals, cfg: SplineConfig) -> np.ndarray:
    """Row k holds the basis integrals over intervals[k] = (t0, t1)."""
    lo, hi = cfg.boundary_knots
    out = np.zeros((len(intervals), cfg.dim))
    breaks = np.unique(np.concatenate([[lo], cfg.internal_knots, [hi]]))
    npts = min(cfg.degree // 2 + 1, 4)
    gl_x, gl_w = _GL[npts]
    for k, (t0, t1) in enumerate(intervals):
        t0 = float(t0)
        t1 = float(t1)
        if t1 < t0:
            raise ValueError("reversed integration interval")
        _check_domain([t0, t1], cfg)
        if t1 == t0:
            continue
        cuts = np.concatenate([[t0], breaks[(breaks > t0) & (breaks < t1)], [t1]])
        for a, b in zip(cuts[:-1], cuts[1:]):
            half = 0.5 * (b - a)
            pts = half * (gl_x + 1.0) + a
            out[k] += half * (gl_w @ basis_matrix(pts, cfg))
    return out


def difference_penalty(Q: int, r: int) -> PenaltyMatrix:
    """Penalty K = D_r' D_r from the r-th forward-difference operator."""
    if not Q > r >= 1:
        raise ValueError("difference penalty requires Q > r >= 1")
    d = np.eye(Q)
    for _ in range(r):
        d = np.diff(d, axis=0)
    return PenaltyMatrix(matrix=d.T @ d, order=r, rank=Q - r)
