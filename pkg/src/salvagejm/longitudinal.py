"""Change-point mixed model for transformed PSA.

Design algebra convention: every subject-level quantity used downstream
(value, slope, running average, post-salvage deviation) is affine in the
stacked fixed effects (beta | beta_post) and in the stacked random effects
u = (b | b_tilde). The builders below therefore return paired fixed/random
design rows; evaluating a feature is a dot product, which is what the
sampler, the quadrature and the simulator all exploit.
"""

import numpy as np

from .basis import basis_deriv_matrix, basis_integral_matrix, basis_matrix
from .core import ModelSpec, Params, PatientRecord, cov_vector

__all__ = [
    "transform",
    "pre_design",
    "pre_design_deriv",
    "pre_design_average",
    "post_design",
    "full_design",
    "eta_pre",
    "eta_post",
    "trajectory_features",
    "longitudinal_loglik",
]


def transform(psa) -> np.ndarray | float:
    """log(PSA + 1) on the ng/mL scale."""
    psa = np.asarray(psa, dtype=float)
    if np.any(psa < 0):
        raise ValueError("negative PSA value")
    out = np.log1p(psa)
    return float(out) if out.ndim == 0 else out


def _time_block(ts, spec: ModelSpec, deriv=0) -> np.ndarray:
    if spec.time_design == "linear":
        ts = np.asarray(ts, dtype=float)
        if deriv == 0:
            return ts[:, None]
        return np.ones((ts.shape[0], 1))
    mat = (basis_deriv_matrix if deriv else basis_matrix)(ts, spec.long_spline)
    return mat[:, 1:]  # first basis function absorbed by the intercept


def pre_design(ts, spec: ModelSpec, cov: np.ndarray):
    """Fixed and random design rows for the pre-salvage mean at times ts."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    n = ts.shape[0]
    tb = _time_block(ts, spec)
    x = np.hstack([np.ones((n, 1)), tb, np.tile(cov, (n, 1))])
    z = np.hstack([np.ones((n, 1)), tb])
    return x, z


def pre_design_deriv(ts, spec: ModelSpec):
    """d/dt of the pre-salvage design rows (covariates and intercept drop out)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    n = ts.shape[0]
    tb = _time_block(ts, spec, deriv=1)
    ncov = len(spec.covariates)
    x = np.hstack([np.zeros((n, 1)), tb, np.zeros((n, ncov))])
    z = np.hstack([np.zeros((n, 1)), tb])
    return x, z


def pre_design_average(ts, spec: ModelSpec, cov: np.ndarray):
    """Design rows of the running average (1/t) * integral_0^t of the mean."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(ts <= 0):
        raise ValueError("average feature undefined at t <= 0")
    n = ts.shape[0]
    if spec.time_design == "linear":
        tb = (ts / 2.0)[:, None]
    else:
        ints = basis_integral_matrix([(0.0, t) for t in ts], spec.long_spline)
        tb = ints[:, 1:] / ts[:, None]
    x = np.hstack([np.ones((n, 1)), tb, np.tile(cov, (n, 1))])
    z = np.hstack([np.ones((n, 1)), tb])
    return x, z


def post_design(ts, spec: ModelSpec, s: float, cov: np.ndarray):
    """Design rows of the post-salvage deviation in relative time t - S."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    n = ts.shape[0]
    rel = (ts - s)[:, None]
    if spec.post_design == "drop_slope":
        zb = np.hstack([np.ones((n, 1)), rel])
    else:
        zb = np.ones((n, 1))
    x = np.hstack([zb, np.tile(cov, (n, 1))])
    return x, zb


def full_design(ts, spec: ModelSpec, patient: PatientRecord, cov=None):
    """Stacked (pre | post) design rows for the measurement mean.

    Rows evaluate mu(t) = x(t) . beta_full + z(t) . u. A measurement at
    exactly t = S belongs to the pre-salvage branch (starting salvage cannot
    affect the measurement that triggered it); the hazard-side indicator
    N(t) = I(t >= S) is unaffected.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if cov is None:
        cov = cov_vector(patient, spec.covariates)
    xp, zp = pre_design(ts, spec, cov)
    n = ts.shape[0]
    x_post = np.zeros((n, spec.p_post))
    z_post = np.zeros((n, spec.q_post))
    if patient.salvage_time is not None:
        mask = ts > patient.salvage_time
        if mask.any():
            xq, zq = post_design(ts[mask], spec, patient.salvage_time, cov)
            x_post[mask] = xq
            z_post[mask] = zq
    return np.hstack([xp, x_post]), np.hstack([zp, z_post])


def eta_pre(t, patient: PatientRecord, spec: ModelSpec, params: Params, u) -> float:
    """Subject-specific linear predictor before salvage (no-salvage trajectory)."""
    cov = cov_vector(patient, spec.covariates)
    x, z = pre_design([t], spec, cov)
    _check_dims(spec, params, u)
    return float(x[0] @ params.beta + z[0] @ np.asarray(u)[: spec.q_pre])


def eta_post(t, patient: PatientRecord, spec: ModelSpec, params: Params, u) -> float:
    """Subject-specific linear predictor at t >= S (pre part plus deviation)."""
    s = patient.salvage_time
    if s is None:
        raise ValueError(f"patient {patient.id} has no salvage time")
    if t < s:
        raise ValueError(f"eta_post requires t >= S (t={t}, S={s})")
    cov = cov_vector(patient, spec.covariates)
    _check_dims(spec, params, u)
    u = np.asarray(u, dtype=float)
    xq, zq = post_design([t], spec, s, cov)
    dev = float(xq[0] @ params.beta_post + zq[0] @ u[spec.q_pre :])
    return eta_pre(t, patient, spec, params, u) + dev


def _check_dims(spec: ModelSpec, params: Params, u):
    u = np.asarray(u)
    if u.shape[-1] != spec.q:
        raise ValueError(f"random effects have dimension {u.shape[-1]}, spec requires {spec.q}")
    if params.beta.shape[0] != spec.p_pre or params.beta_post.shape[0] != spec.p_post:
        raise ValueError("fixed-effect dimensions do not match the model spec")


def feature_designs(ts, feature: str, spec: ModelSpec, cov: np.ndarray, post: bool, s=None):
    """Affine representation (X, Z) of one hazard feature at times ts.

    ``post`` selects the g-feature interpretation ("value" then means the full
    post-salvage mean and needs the, possibly counterfactual, salvage time
    ``s``); pre-salvage f features never touch the post design blocks.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    n = ts.shape[0]
    p_pre, p_post = spec.p_pre, spec.p_post
    q_pre, q_post = spec.q_pre, spec.q_post
    zeros_xpost = np.zeros((n, p_post))
    zeros_zpost = np.zeros((n, q_post))
    if not post:
        if feature == "value":
            x, z = pre_design(ts, spec, cov)
        elif feature == "slope":
            x, z = pre_design_deriv(ts, spec)
        elif feature == "average":
            x, z = pre_design_average(ts, spec, cov)
        elif feature == "lagdiff":
            # eta(t) - eta(t - 1); clamps the lagged time at 0 below t = 1
            x1, z1 = pre_design(ts, spec, cov)
            x0, z0 = pre_design(np.maximum(ts - 1.0, 0.0), spec, cov)
            x, z = x1 - x0, z1 - z0
        else:
            raise ValueError(f"unknown pre-salvage feature {feature!r}")
        return np.hstack([x, zeros_xpost]), np.hstack([z, zeros_zpost])
    if feature == "value":
        if s is None:
            raise ValueError("post-salvage value feature requires a salvage time")
        x, z = pre_design(ts, spec, cov)
        xq, zq = post_design(ts, spec, s, cov)
        return np.hstack([x, xq]), np.hstack([z, zq])
    if feature in ("drop_level", "slope_level"):
        k = 0 if feature == "drop_level" else 1
        x = np.zeros((n, p_pre + p_post))
        z = np.zeros((n, q_pre + q_post))
        x[:, p_pre + k] = 1.0
        z[:, q_pre + k] = 1.0
        return x, z
    raise ValueError(f"unknown post-salvage feature {feature!r}")


def trajectory_features(
    t, patient: PatientRecord, spec: ModelSpec, params: Params, u, features, regime="pre", s=None
) -> np.ndarray:
    """Evaluate a tuple of trajectory features (f or g per ``regime``) at t.

    For the post regime ``s`` defaults to the patient's own salvage time and
    t must not precede it.
    """
    cov = cov_vector(patient, spec.covariates)
    _check_dims(spec, params, u)
    u = np.asarray(u, dtype=float)
    post = regime == "post"
    if post:
        if s is None:
            s = patient.salvage_time
        if s is None:
            raise ValueError("post-salvage features need a salvage time")
        if t < s:
            raise ValueError(f"post-salvage features invalid at t={t} < S={s}")
    out = np.empty(len(features))
    for k, feat in enumerate(features):
        x, z = feature_designs([t], feat, spec, cov, post=post, s=s)
        out[k] = x[0] @ params.beta_full + z[0] @ u
    return out


def longitudinal_loglik(patient: PatientRecord, spec: ModelSpec, params: Params, u) -> float:
    """Gaussian log-likelihood of the patient's measurement series."""
    if patient.n_obs == 0:
        return 0.0
    _check_dims(spec, params, u)
    x, z = full_design(patient.times, spec, patient)
    mu = x @ params.beta_full + z @ np.asarray(u, dtype=float)
    resid = patient.y - mu
    s2 = params.sigma2
    return float(-0.5 * patient.n_obs * np.log(2 * np.pi * s2) - 0.5 * np.sum(resid**2) / s2)
