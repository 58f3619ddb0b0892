"""Cause-specific hazards, Gauss-Kronrod cumulative hazards, competing-risks CIF.

Hazard evaluation is organized around vectorized callables h(ts) -> array
built once per (patient, parameters, regime); the log hazard is assembled
from the baseline spline, baseline covariates, salvage-status terms and the
f/g trajectory features of the longitudinal module.

Counterfactual regimes:
  observed            salvage status as recorded
  treated_at(t0)      salvage forced at t0 (post-salvage random effects at
                      their conditional prior mean given b, or Monte-Carlo
                      averaged with treated_btilde="marginal")
  untreated           salvage never initiated
"""

from dataclasses import dataclass

import numpy as np

from .basis import basis_matrix
from .core import ModelSpec, Params, PatientRecord, cov_vector
from .longitudinal import feature_designs

__all__ = [
    "Regime",
    "GK_NODES",
    "GK_WEIGHTS",
    "GAUSS7_WEIGHTS",
    "gauss_kronrod_panel",
    "cumulative_hazard",
    "cumulative_hazard_with_error",
    "fixed_quadrature",
    "metastasis_hazard_fn",
    "death_hazard_fn",
    "hazard_metastasis",
    "hazard_death",
    "cif_window",
    "cif_window_from_hazards",
    "hazard_ratio_salvage",
    "conditional_post_mean",
]

# 15-point Kronrod extension of 7-point Gauss-Legendre on [-1, 1]
GK_NODES = np.array(
    [
        -0.991455371120812639206854697526329,
        -0.949107912342758524526189684047851,
        -0.864864423359769072789712788640926,
        -0.741531185599394439863864773280788,
        -0.586087235467691130294144838258730,
        -0.405845151377397166906606412076961,
        -0.207784955007898467600689403773245,
        0.0,
        0.207784955007898467600689403773245,
        0.405845151377397166906606412076961,
        0.586087235467691130294144838258730,
        0.741531185599394439863864773280788,
        0.864864423359769072789712788640926,
        0.949107912342758524526189684047851,
        0.991455371120812639206854697526329,
    ]
)
GK_WEIGHTS = np.array(
    [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
        0.204432940075298892414161999234649,
        0.190350578064785409913256402421014,
        0.169004726639267902826583426598550,
        0.140653259715525918745189590510238,
        0.104790010322250183839876322541518,
        0.063092092629978553290700663189204,
        0.022935322010529224963732008058970,
    ]
)
# embedded Gauss-7 weights sit on the odd Kronrod nodes
GAUSS7_WEIGHTS = np.array(
    [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
        0.381830050505118944950369775488975,
        0.279705391489276667901467771423780,
        0.129484966168869693270611432679082,
    ]
)
_GAUSS7_IDX = np.arange(1, 15, 2)


def gauss_kronrod_panel(f, a: float, b: float):
    """One GK15 panel on [a, b]: (Kronrod value, Gauss value, |K - G|)."""
    half = 0.5 * (b - a)
    pts = half * (GK_NODES + 1.0) + a
    vals = np.asarray(f(pts), dtype=float)
    k15 = half * float(GK_WEIGHTS @ vals)
    g7 = half * float(GAUSS7_WEIGHTS @ vals[_GAUSS7_IDX])
    return k15, g7, abs(k15 - g7)


def cumulative_hazard_with_error(t0, t1, hazard, subdivide=False, tol=1e-8, max_depth=24):
    """Integral of a hazard over [t0, t1] with the Gauss/Kronrod discrepancy.

    A single GK15 panel by default; with ``subdivide`` panels are bisected
    while the embedded-rule discrepancy exceeds ``tol``.
    """
    if t1 < t0:
        raise ValueError(f"reversed integration interval [{t0}, {t1}]")
    if t1 == t0:
        return 0.0, 0.0
    k15, _, err = gauss_kronrod_panel(hazard, t0, t1)
    if not subdivide or err <= tol or max_depth <= 0:
        return k15, err
    mid = 0.5 * (t0 + t1)
    left = cumulative_hazard_with_error(t0, mid, hazard, True, tol / 2, max_depth - 1)
    right = cumulative_hazard_with_error(mid, t1, hazard, True, tol / 2, max_depth - 1)
    return left[0] + right[0], left[1] + right[1]


def cumulative_hazard(t0, t1, hazard, subdivide=False, tol=1e-8) -> float:
    value, _ = cumulative_hazard_with_error(t0, t1, hazard, subdivide=subdivide, tol=tol)
    return value


def fixed_quadrature(t0: float, t1: float, panel_length: float = 5.0):
    """Deterministic composite GK15 nodes/weights for [t0, t1].

    Used where node positions must be precomputable (likelihood, simulator);
    the panel count grows with the interval so accuracy does not degrade on
    long follow-up windows.
    """
    if t1 < t0:
        raise ValueError("reversed interval")
    if t1 == t0:
        return np.empty(0), np.empty(0)
    npanels = max(1, int(np.ceil((t1 - t0) / panel_length)))
    edges = np.linspace(t0, t1, npanels + 1)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        nodes.append(half * (GK_NODES + 1.0) + a)
        weights.append(half * GK_WEIGHTS)
    return np.concatenate(nodes), np.concatenate(weights)


@dataclass(frozen=True)
class Regime:
    kind: str  # "observed" | "treated_at" | "untreated"
    t0: float | None = None

    @staticmethod
    def observed() -> "Regime":
        return Regime("observed")

    @staticmethod
    def treated_at(t0: float) -> "Regime":
        return Regime("treated_at", float(t0))

    @staticmethod
    def untreated() -> "Regime":
        return Regime("untreated")

    def salvage_time(self, patient: PatientRecord):
        if self.kind == "observed":
            return patient.salvage_time
        if self.kind == "treated_at":
            return self.t0
        return None


def conditional_post_mean(omega: np.ndarray, q_pre: int, b: np.ndarray) -> np.ndarray:
    """E[b_tilde | b] under u = (b, b_tilde) ~ N(0, Omega)."""
    s11 = omega[:q_pre, :q_pre]
    s21 = omega[q_pre:, :q_pre]
    return s21 @ np.linalg.solve(s11, b)


def _regime_u(patient, spec, params, u, regime, treated_btilde, rng):
    """Random-effects vectors (one row per Monte-Carlo replicate) for a regime."""
    u = np.asarray(u, dtype=float)
    if regime.kind != "treated_at":
        return u[None, :]
    b = u[: spec.q_pre]
    cond_mean = conditional_post_mean(params.omega, spec.q_pre, b)
    if treated_btilde == "plugin":
        rows = np.concatenate([b, cond_mean])[None, :]
        return rows
    if treated_btilde == "marginal":
        if rng is None:
            raise ValueError("marginal b_tilde integration needs an rng")
        s11 = params.omega[: spec.q_pre, : spec.q_pre]
        s21 = params.omega[spec.q_pre :, : spec.q_pre]
        s22 = params.omega[spec.q_pre :, spec.q_pre :]
        cond_cov = s22 - s21 @ np.linalg.solve(s11, s21.T)
        chol = np.linalg.cholesky(cond_cov + 1e-12 * np.eye(cond_cov.shape[0]))
        draws = cond_mean + rng.standard_normal((32, spec.q_post)) @ chol.T
        return np.hstack([np.tile(b, (32, 1)), draws])
    raise ValueError("treated_btilde must be 'plugin' or 'marginal'")


def metastasis_hazard_fn(
    patient: PatientRecord,
    spec: ModelSpec,
    params: Params,
    u,
    regime: Regime = Regime.observed(),
    treated_btilde: str = "plugin",
    rng=None,
):
    """Vectorized metastasis hazard h(ts) under the given regime."""
    cov = cov_vector(patient, spec.covariates)
    w = cov_vector(patient, spec.hazard_covariates_m)
    s = regime.salvage_time(patient)
    u_rows = _regime_u(patient, spec, params, u, regime, treated_btilde, rng)
    beta_full = params.beta_full
    interaction = (
        patient.covariates[spec.duration_interaction]
        if spec.duration_interaction is not None
        else 0.0
    )

    def hazard(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        base = basis_matrix(ts, spec.hazard_spline_m) @ params.psi_hm
        lin = base + (w @ params.psi_m if w.size else 0.0)
        if s is None:
            post = np.zeros(ts.shape, dtype=bool)
        else:
            post = ts >= s
        pre = ~post
        out = np.zeros((u_rows.shape[0], ts.shape[0]))
        if pre.any() and params.alpha_m.size:
            fvals = np.zeros((u_rows.shape[0], pre.sum(), len(spec.pre_features)))
            for k, feat in enumerate(spec.pre_features):
                x, z = feature_designs(ts[pre], feat, spec, cov, post=False)
                fvals[:, :, k] = x @ beta_full + u_rows @ z.T
            out[:, pre] += fvals @ params.alpha_m
        if post.any():
            dur = ts[post] - s
            gterm = params.gamma_m + params.gamma_m1 * dur + params.gamma_m2 * dur * interaction
            out[:, post] += gterm
            if params.xi_m.size:
                gvals = np.zeros((u_rows.shape[0], post.sum(), len(spec.post_features)))
                for k, feat in enumerate(spec.post_features):
                    x, z = feature_designs(ts[post], feat, spec, cov, post=True, s=s)
                    gvals[:, :, k] = x @ beta_full + u_rows @ z.T
                out[:, post] += gvals @ params.xi_m
        return np.exp(lin + out).mean(axis=0)

    return hazard


def death_hazard_fn(patient: PatientRecord, spec: ModelSpec, params: Params, regime=Regime.observed()):
    """Vectorized death hazard; by construction free of longitudinal features."""
    w = cov_vector(patient, spec.hazard_covariates_d)
    s = regime.salvage_time(patient)

    def hazard(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        lin = basis_matrix(ts, spec.hazard_spline_d) @ params.psi_hd
        if w.size:
            lin = lin + w @ params.psi_d
        if s is not None:
            lin = lin + params.gamma_d * (ts >= s)
        return np.exp(lin)

    return hazard


def hazard_metastasis(t, patient, spec, params, u, regime=Regime.observed(), **kw) -> float:
    return float(metastasis_hazard_fn(patient, spec, params, u, regime, **kw)([t])[0])


def hazard_death(t, patient, spec, params, regime=Regime.observed()) -> float:
    return float(death_hazard_fn(patient, spec, params, regime)([t])[0])


def cif_window_from_hazards(t, dt, hm, hd, subdivide=True, tol=1e-8) -> float:
    """Pr{event of the hm cause in (t, t+dt] | alive at t} for hazard callables.

    Outer GK15 over [t, t+dt]; the inner survival integral is recomputed from
    t for each outer node. Conditioning on survival to t cancels the
    exp(-integral over [0, t]) factor, which is never computed.
    """
    if dt < 0:
        raise ValueError("negative risk window")
    if dt == 0:
        return 0.0

    def total(ts):
        return hm(ts) + hd(ts)

    def integrand(vs):
        vs = np.atleast_1d(vs)
        surv = np.array(
            [cumulative_hazard(t, v, total, subdivide=subdivide, tol=tol) for v in vs]
        )
        return hm(vs) * np.exp(-surv)

    value = cumulative_hazard(t, t + dt, integrand, subdivide=subdivide, tol=tol)
    return float(min(max(value, 0.0), 1.0))


def cif_window(
    t,
    dt,
    patient: PatientRecord,
    spec: ModelSpec,
    params: Params,
    u,
    regime: Regime = Regime.observed(),
    treated_btilde: str = "plugin",
    rng=None,
    subdivide=True,
) -> float:
    """Metastasis cumulative incidence over (t, t+dt] given event-free at t."""
    hm = metastasis_hazard_fn(patient, spec, params, u, regime, treated_btilde, rng)
    hd = death_hazard_fn(patient, spec, params, regime)
    return cif_window_from_hazards(t, dt, hm, hd, subdivide=subdivide)


def hazard_ratio_salvage(t, patient: PatientRecord, spec: ModelSpec, params: Params, u) -> float:
    """Treated-vs-untreated metastasis hazard ratio at t > S.

    The untreated side extrapolates the no-salvage trajectory. With the
    duration terms disabled this is exp(gamma_m + xi'g(eta_post) - alpha'f(eta)).
    """
    s = patient.salvage_time
    if s is None or t <= s:
        raise ValueError("hazard ratio for salvage is defined for t > S only")
    cov = cov_vector(patient, spec.covariates)
    u = np.asarray(u, dtype=float)
    beta_full = params.beta_full
    dur = t - s
    interaction = (
        patient.covariates[spec.duration_interaction]
        if spec.duration_interaction is not None
        else 0.0
    )
    log_hr = params.gamma_m + params.gamma_m1 * dur + params.gamma_m2 * dur * interaction
    for k, feat in enumerate(spec.post_features):
        x, z = feature_designs([t], feat, spec, cov, post=True, s=s)
        log_hr += params.xi_m[k] * (x[0] @ beta_full + z[0] @ u)
    for k, feat in enumerate(spec.pre_features):
        x, z = feature_designs([t], feat, spec, cov, post=False)
        log_hr -= params.alpha_m[k] * (x[0] @ beta_full + z[0] @ u)
    return float(np.exp(log_hr))
