"""Subject-level posterior predictive counterfactual risks.

Monte-Carlo scheme per draw l: take a parameter draw from the stored
posterior, draw the subject's random effects given the history up to the
decision time by Metropolis-Hastings, then evaluate the metastasis CIF over
(t, t+dt] under both regimes (salvage initiated at t, or never). Per-query
RNG streams derive from (seed, patient id, t) so concurrent queries are
reproducible and independent.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .core import ModelSpec, Params, PatientRecord, cov_vector, truncate_history
from .inference import PosteriorDraws
from .longitudinal import full_design
from .survival import (
    Regime,
    cif_window_from_hazards,
    death_hazard_fn,
    fixed_quadrature,
    metastasis_hazard_fn,
)

__all__ = [
    "RiskQuery",
    "RiskPrediction",
    "UPosterior",
    "sample_random_effects",
    "predict_counterfactual_risk",
    "conditional_effect",
    "STEffectEstimate",
]

S2_WARMUP = 100


@dataclass(frozen=True)
class RiskQuery:
    """What-if query: patient history up to t, horizon dt, L Monte-Carlo draws."""

    patient: PatientRecord
    t: float
    dt: float
    L: int | None = None
    seed: int = 0
    resample_draws: bool = False
    treated_btilde: str = "plugin"

    def __post_init__(self):
        if self.dt < 0:
            raise ValueError("horizon dt must be >= 0")
        if self.L is not None and self.L < 1:
            raise ValueError("L must be >= 1")
        if self.patient.salvage_time is not None and self.patient.salvage_time <= self.t:
            raise ValueError("patient already on salvage at decision time")

    def history(self) -> PatientRecord:
        return truncate_history(self.patient, self.t)


@dataclass
class RiskPrediction:
    t: float
    dt: float
    pi_treated: np.ndarray  # per-draw risks under salvage at t
    pi_untreated: np.ndarray
    seed: int

    def __post_init__(self):
        for arr in (self.pi_treated, self.pi_untreated):
            if np.any((arr < 0) | (arr > 1)):
                raise ValueError("risk outside [0, 1]")

    @property
    def point_treated(self) -> float:
        return float(np.mean(self.pi_treated))

    @property
    def point_untreated(self) -> float:
        return float(np.mean(self.pi_untreated))

    def interval(self, which="treated", level=0.95) -> tuple[float, float]:
        arr = self.pi_treated if which == "treated" else self.pi_untreated
        a = (1.0 - level) / 2.0
        return tuple(np.quantile(arr, [a, 1.0 - a]))


@dataclass
class STEffectEstimate:
    """Salvage-therapy effect estimate with its variance decomposition."""

    effect_type: str  # "marginal" | "conditional" | "marginal-conditional"
    t: float
    dt: float
    point: float
    n_r: int | None = None
    resample_var: float | None = None
    posterior_var: float | None = None
    quantile_interval: tuple[float, float] | None = None
    per_draw: np.ndarray | None = field(default=None, repr=False)
    predicate: str | None = None

    @property
    def total_var(self) -> float | None:
        if self.resample_var is None or self.posterior_var is None:
            return None
        return self.resample_var + self.posterior_var

    @property
    def normal_interval(self) -> tuple[float, float] | None:
        if self.total_var is None:
            return None
        half = 1.96 * np.sqrt(self.total_var)
        return (self.point - half, self.point + half)

    def to_dict(self) -> dict:
        return {
            "effect_type": self.effect_type,
            "t": self.t,
            "dt": self.dt,
            "point": self.point,
            "n_r": self.n_r,
            "resample_var": self.resample_var,
            "posterior_var": self.posterior_var,
            "total_var": self.total_var,
            "normal_interval": self.normal_interval,
            "quantile_interval": self.quantile_interval,
            "predicate": self.predicate,
        }


def query_rng(seed: int, patient_id, t: float) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{patient_id}|{t}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class UPosterior:
    """Target density of [u | survival to t, history, parameters] and its sampler.

    The survival factor conditions on event-free follow-up to t under the
    no-salvage regime; longitudinal terms use measurements up to t. The MH
    proposal covariance comes from a Laplace approximation computed once.
    """

    def __init__(self, patient: PatientRecord, t: float, spec: ModelSpec):
        self.spec = spec
        self.t = float(t)
        self.patient = truncate_history(patient, t)
        if spec.time_design == "bspline" and not spec.long_spline.contains(t):
            raise ValueError("decision time outside the longitudinal spline domain")
        pat = self.patient
        self.X, self.Z = (
            full_design(pat.times, spec, pat) if pat.n_obs else
            (np.zeros((0, spec.p_pre + spec.p_post)), np.zeros((0, spec.q)))
        )
        self.y = pat.y
        # node designs for the event-free survival factor (no-salvage regime)
        # are fixed once t is known, so each density call is linear algebra
        if spec.survival_enabled and t > 0:
            from .basis import basis_matrix
            from .core import cov_vector
            from .longitudinal import feature_designs

            self.nodes, self.weights = fixed_quadrature(0.0, t)
            self.bhm = basis_matrix(self.nodes, spec.hazard_spline_m)
            self.bhd = basis_matrix(self.nodes, spec.hazard_spline_d)
            self.w_m = cov_vector(pat, spec.hazard_covariates_m)
            self.w_d = cov_vector(pat, spec.hazard_covariates_d)
            cov = cov_vector(pat, spec.covariates)
            self.fx = []
            self.fz = []
            for feat in spec.pre_features:
                x, z = feature_designs(self.nodes, feat, spec, cov, post=False)
                self.fx.append(x)
                self.fz.append(z)
        else:
            self.nodes, self.weights = np.zeros(0), np.zeros(0)

    def log_density(self, u: np.ndarray, params: Params) -> float:
        spec = self.spec
        u = np.asarray(u, dtype=float)
        chol = np.linalg.cholesky(params.omega)
        sol = np.linalg.solve(chol, u)
        out = -0.5 * (
            spec.q * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(chol))) + sol @ sol
        )
        if self.y.size:
            mu = self.X @ params.beta_full + self.Z @ u
            out += float(
                -0.5 * self.y.size * np.log(2 * np.pi * params.sigma2)
                - np.sum((self.y - mu) ** 2) / (2 * params.sigma2)
            )
        if self.nodes.size:
            lm = self.bhm @ params.psi_hm
            if self.w_m.size:
                lm = lm + self.w_m @ params.psi_m
            beta_full = params.beta_full
            for k in range(len(self.fx)):
                lm = lm + params.alpha_m[k] * (self.fx[k] @ beta_full + self.fz[k] @ u)
            ld = self.bhd @ params.psi_hd
            if self.w_d.size:
                ld = ld + self.w_d @ params.psi_d
            out -= float(self.weights @ np.exp(lm)) + float(self.weights @ np.exp(ld))
        return float(out)

    def laplace(self, params: Params):
        """Mode and covariance of the target, for use as a proposal."""
        spec = self.spec

        def neg(u):
            return -self.log_density(u, params)

        res = optimize.minimize(neg, np.zeros(spec.q), method="L-BFGS-B")
        mode = res.x
        # central-difference Hessian of the negative log density
        q = spec.q
        h = 1e-4
        hess = np.zeros((q, q))
        for i in range(q):
            for j in range(i, q):
                ei = np.zeros(q)
                ej = np.zeros(q)
                ei[i] = h
                ej[j] = h
                fpp = neg(mode + ei + ej)
                fpm = neg(mode + ei - ej)
                fmp = neg(mode - ei + ej)
                fmm = neg(mode - ei - ej)
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
        try:
            w, v = np.linalg.eigh(hess)
            w = np.maximum(w, 1e-6)
            cov = (v / w) @ v.T
        except np.linalg.LinAlgError:
            cov = params.omega.copy()
        return mode, cov

    def sample(self, params: Params, rng, start, prop_chol, warmup=S2_WARMUP):
        """One draw by random-walk MH: ``warmup`` steps, keep the final state."""
        u = np.asarray(start, dtype=float).copy()
        lp = self.log_density(u, params)
        if not np.isfinite(lp):
            raise FloatingPointError("non-finite random-effects target at start")
        scale = 2.38 / np.sqrt(self.spec.q)
        for _ in range(warmup):
            prop = u + scale * (prop_chol @ rng.standard_normal(self.spec.q))
            lp_prop = self.log_density(prop, params)
            if np.log(rng.uniform()) < lp_prop - lp:
                u, lp = prop, lp_prop
        return u


def sample_random_effects(
    patient: PatientRecord,
    t: float,
    spec: ModelSpec,
    params: Params,
    rng,
    n_draws: int = 1,
    warmup: int = S2_WARMUP,
):
    """Draws from [u | T > t, history(t), covariates, params] via MH."""
    target = UPosterior(patient, t, spec)
    mode, cov = target.laplace(params)
    prop_chol = np.linalg.cholesky(cov + 1e-10 * np.eye(spec.q))
    out = np.empty((n_draws, spec.q))
    for l in range(n_draws):
        out[l] = target.sample(params, rng, mode, prop_chol, warmup=warmup)
    return out[0] if n_draws == 1 else out


def predict_counterfactual_risk(query: RiskQuery, draws: PosteriorDraws) -> RiskPrediction:
    """S1-S3: parameter draw, random-effects draw, paired regime risks."""
    spec = draws.spec
    history = query.history()
    n_avail = draws.n_draws
    L = query.L if query.L is not None else n_avail
    if L > n_avail and not query.resample_draws:
        raise ValueError(
            f"requested L={L} exceeds the {n_avail} stored draws; set resample_draws"
        )
    rng = query_rng(query.seed, query.patient.id, query.t)
    if query.resample_draws and L != n_avail:
        idx = rng.integers(0, n_avail, size=L)
    else:
        idx = np.arange(L)

    target = UPosterior(history, query.t, spec)
    ref_params = draws.posterior_mean_params()
    mode, cov = target.laplace(ref_params)
    prop_chol = np.linalg.cholesky(cov + 1e-10 * np.eye(spec.q))

    pi1 = np.empty(L)
    pi0 = np.empty(L)
    for k, l in enumerate(idx):
        params = draws.params_from(int(l))
        u = target.sample(params, rng, mode, prop_chol)
        if query.dt == 0:
            pi1[k] = pi0[k] = 0.0
            continue
        hm1 = metastasis_hazard_fn(
            history, spec, params, u, Regime.treated_at(query.t),
            treated_btilde=query.treated_btilde, rng=rng,
        )
        hd1 = death_hazard_fn(history, spec, params, Regime.treated_at(query.t))
        hm0 = metastasis_hazard_fn(history, spec, params, u, Regime.untreated())
        hd0 = death_hazard_fn(history, spec, params, Regime.untreated())
        pi1[k] = cif_window_from_hazards(query.t, query.dt, hm1, hd1)
        pi0[k] = cif_window_from_hazards(query.t, query.dt, hm0, hd0)
    return RiskPrediction(t=query.t, dt=query.dt, pi_treated=pi1, pi_untreated=pi0, seed=query.seed)


def conditional_effect(query: RiskQuery, draws: PosteriorDraws) -> STEffectEstimate:
    """Monte-Carlo mean of per-draw risk differences for one patient."""
    pred = predict_counterfactual_risk(query, draws)
    diffs = pred.pi_treated - pred.pi_untreated
    qlo, qhi = np.quantile(diffs, [0.025, 0.975])
    return STEffectEstimate(
        effect_type="conditional",
        t=query.t,
        dt=query.dt,
        point=float(diffs.mean()),
        quantile_interval=(float(qlo), float(qhi)),
        per_draw=diffs,
    )
