"""Cohort-level effect estimators and their variance procedures.

Marginal and marginal-conditional effects average the per-patient conditional
effect over a (predicate-filtered) risk set. Their variance combines a
cohort-resampling term (posterior held fixed at the original fit) with the
posterior variance of the effect on the original cohort; the conditional
effect's variance replaces cohort resampling with a parametric bootstrap of
the patient's own measurement history.
"""

from dataclasses import dataclass, replace

import numpy as np

from .core import ModelSpec, PatientRecord, truncate_history
from .inference import PosteriorDraws
from .longitudinal import full_design
from .prediction import (
    RiskQuery,
    STEffectEstimate,
    UPosterior,
    predict_counterfactual_risk,
    query_rng,
)

__all__ = [
    "HistoryPredicate",
    "risk_set",
    "marginal_effect",
    "variance_marginal",
    "variance_conditional",
    "per_patient_draw_matrix",
    "EmptyRiskSetError",
]


class EmptyRiskSetError(ValueError):
    pass


@dataclass(frozen=True)
class HistoryPredicate:
    """PSA-history condition selecting the averaging group at time t.

    kinds: all | last_value_above(c) | elevated_in_window(c, window_months)
    | range(lo, hi) | composite (base + covariate box constraints).
    Thresholds are on the ng/mL scale; measurements are stored transformed, so
    comparisons go through log(c + 1).
    """

    kind: str = "all"
    threshold: float | None = None
    lo: float | None = None
    hi: float | None = None
    window_months: float | None = None
    covariate_bounds: tuple = ()  # (name, lo, hi) triples
    base: "HistoryPredicate | None" = None

    def __post_init__(self):
        if self.kind not in ("all", "last_value_above", "elevated_in_window", "range", "composite"):
            raise ValueError(f"unknown predicate kind {self.kind!r}")
        if self.kind == "last_value_above" and (self.threshold is None or self.threshold < 0):
            raise ValueError("last_value_above needs a threshold >= 0")
        if self.kind == "elevated_in_window":
            if self.threshold is None or self.threshold < 0:
                raise ValueError("elevated_in_window needs a threshold >= 0")
            if not self.window_months or self.window_months <= 0:
                raise ValueError("elevated_in_window needs a positive window")
        if self.kind == "range" and (self.lo is None or self.hi is None or self.lo > self.hi):
            raise ValueError("range needs lo <= hi")

    def matches(self, patient: PatientRecord, t: float) -> bool:
        obs = patient.times <= t
        if self.kind == "all":
            return True
        if self.kind == "composite":
            for name, lo, hi in self.covariate_bounds:
                v = patient.covariates.get(name)
                if v is None or not (lo <= v <= hi):
                    return False
            return self.base.matches(patient, t) if self.base is not None else True
        if not obs.any():
            return False
        y_obs = patient.y[obs]
        if self.kind == "last_value_above":
            return bool(y_obs[-1] > np.log1p(self.threshold))
        if self.kind == "range":
            return bool(np.log1p(self.lo) <= y_obs[-1] <= np.log1p(self.hi))
        # elevated_in_window: measurements exist in the window and all exceed c
        window = self.window_months / 12.0
        in_win = obs & (patient.times > t - window)
        if not in_win.any():
            return False
        return bool(np.all(patient.y[in_win] > np.log1p(self.threshold)))

    def describe(self) -> str:
        if self.kind == "all":
            return "all"
        if self.kind == "last_value_above":
            return f"last_value_above({self.threshold})"
        if self.kind == "range":
            return f"range({self.lo},{self.hi})"
        if self.kind == "elevated_in_window":
            return f"elevated_in_window({self.threshold},{self.window_months}mo)"
        parts = [f"{n}in[{lo},{hi}]" for n, lo, hi in self.covariate_bounds]
        if self.base is not None:
            parts.append(self.base.describe())
        return "composite(" + ",".join(parts) + ")"


def risk_set(patients, t: float, predicate: HistoryPredicate = HistoryPredicate()) -> list:
    """Ids of patients event-free and salvage-free past t that match the predicate."""
    if t < 0:
        raise ValueError("t must be >= 0")
    out = []
    for pat in patients:
        if pat.event_time <= t:
            continue
        if pat.salvage_time is not None and pat.salvage_time <= t:
            continue
        if predicate.matches(pat, t):
            out.append(pat.id)
    return out


def per_patient_draw_matrix(
    patients,
    t: float,
    dt: float,
    draws: PosteriorDraws,
    predicate: HistoryPredicate = HistoryPredicate(),
    L: int | None = None,
    seed: int = 0,
    plugin_u: dict | None = None,
    treated_btilde: str = "plugin",
):
    """Per-draw risk differences for every risk-set patient: (ids, D[n_r, L]).

    ``plugin_u`` maps patient id -> random-effects vector and bypasses the S2
    sampler (used for ground-truth plug-in evaluation).
    """
    ids = risk_set(patients, t, predicate)
    by_id = {p.id: p for p in patients}
    rows = []
    for pid in ids:
        query = RiskQuery(
            patient=by_id[pid], t=t, dt=dt, L=L, seed=seed, treated_btilde=treated_btilde
        )
        if plugin_u is not None:
            rows.append(_plugin_diffs(query, draws, np.asarray(plugin_u[pid], dtype=float)))
        else:
            pred = predict_counterfactual_risk(query, draws)
            rows.append(pred.pi_treated - pred.pi_untreated)
    return ids, (np.vstack(rows) if rows else np.zeros((0, L or draws.n_draws)))


def _plugin_diffs(query: RiskQuery, draws: PosteriorDraws, u: np.ndarray) -> np.ndarray:
    from .survival import Regime, cif_window_from_hazards, death_hazard_fn, metastasis_hazard_fn

    history = query.history()
    spec = draws.spec
    L = query.L if query.L is not None else draws.n_draws
    rng = query_rng(query.seed, query.patient.id, query.t)
    out = np.empty(L)
    for l in range(L):
        params = draws.params_from(l)
        if query.dt == 0:
            out[l] = 0.0
            continue
        hm1 = metastasis_hazard_fn(
            history, spec, params, u, Regime.treated_at(query.t),
            treated_btilde=query.treated_btilde, rng=rng,
        )
        hd1 = death_hazard_fn(history, spec, params, Regime.treated_at(query.t))
        hm0 = metastasis_hazard_fn(history, spec, params, u, Regime.untreated())
        hd0 = death_hazard_fn(history, spec, params, Regime.untreated())
        out[l] = cif_window_from_hazards(query.t, query.dt, hm1, hd1) - cif_window_from_hazards(
            query.t, query.dt, hm0, hd0
        )
    return out


def marginal_effect(
    patients,
    t: float,
    dt: float,
    draws: PosteriorDraws,
    predicate: HistoryPredicate = HistoryPredicate(),
    L: int | None = None,
    seed: int = 0,
    plugin_u: dict | None = None,
) -> STEffectEstimate:
    """Risk-set average of conditional effects: ST^M, or ST^MC when filtered."""
    ids, d = per_patient_draw_matrix(
        patients, t, dt, draws, predicate, L=L, seed=seed, plugin_u=plugin_u
    )
    if not ids:
        raise EmptyRiskSetError(
            f"empty risk set at t={t} under predicate {predicate.describe()}"
        )
    per_draw = d.mean(axis=0)
    qlo, qhi = np.quantile(per_draw, [0.025, 0.975])
    return STEffectEstimate(
        effect_type="marginal" if predicate.kind == "all" else "marginal-conditional",
        t=t,
        dt=dt,
        point=float(d.mean()),
        n_r=len(ids),
        quantile_interval=(float(qlo), float(qhi)),
        per_draw=per_draw,
        predicate=predicate.describe(),
    )


def variance_marginal(
    patients,
    t: float,
    dt: float,
    draws: PosteriorDraws,
    predicate: HistoryPredicate = HistoryPredicate(),
    M: int = 200,
    seed: int = 0,
    L: int | None = None,
    plugin_u: dict | None = None,
) -> STEffectEstimate:
    """Cohort-resampling variance with the posterior-variance correction term.

    Resamples draw whole cohorts with replacement and re-average the
    posterior-mean patient effects (the model is never refit); the correction
    adds the posterior variance of the effect on the original cohort.
    """
    if M < 2:
        raise ValueError("variance estimation needs M >= 2 resamples")
    patients = list(patients)
    ids, d = per_patient_draw_matrix(
        patients, t, dt, draws, predicate, L=L, seed=seed, plugin_u=plugin_u
    )
    if not ids:
        raise EmptyRiskSetError(
            f"empty risk set at t={t} under predicate {predicate.describe()}"
        )
    id_to_row = {pid: k for k, pid in enumerate(ids)}
    patient_means = d.mean(axis=1)  # posterior-mean effect per risk-set patient
    point = float(patient_means.mean())
    per_draw = d.mean(axis=0)
    posterior_var = float(per_draw.var(ddof=1)) if per_draw.size > 1 else 0.0

    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    n = len(patients)
    estimates = np.empty(M)
    # the filtered risk-set size varies across resamples by construction
    for m in range(M):
        for attempt in range(10 * M):
            take = rng.integers(0, n, size=n)
            rows = [id_to_row[patients[j].id] for j in take if patients[j].id in id_to_row]
            if rows:
                break
        else:
            raise EmptyRiskSetError(
                f"all resamples produced an empty filtered risk set at t={t}"
            )
        estimates[m] = patient_means[rows].mean()
    resample_var = float(estimates.var(ddof=1))
    qlo, qhi = np.quantile(d.mean(axis=0), [0.025, 0.975])
    return STEffectEstimate(
        effect_type="marginal" if predicate.kind == "all" else "marginal-conditional",
        t=t,
        dt=dt,
        point=point,
        n_r=len(ids),
        resample_var=resample_var,
        posterior_var=posterior_var,
        quantile_interval=(float(qlo), float(qhi)),
        per_draw=d.mean(axis=0),
        predicate=predicate.describe(),
    )


def variance_conditional(
    patient: PatientRecord,
    t: float,
    dt: float,
    draws: PosteriorDraws,
    M: int = 100,
    seed: int = 0,
    L: int | None = None,
) -> STEffectEstimate:
    """Parametric-bootstrap variance of the conditional effect.

    Each replicate redraws parameters and random effects given the observed
    history, simulates a synthetic pre-salvage history at the patient's own
    measurement times, and re-estimates the effect on it; the posterior
    variance on the observed history is added as the correction term.
    """
    if M < 2:
        raise ValueError("variance estimation needs M >= 2 replicates")
    spec = draws.spec
    history = truncate_history(patient, t)
    base_query = RiskQuery(patient=history, t=t, dt=dt, L=L, seed=seed)
    base_pred = predict_counterfactual_risk(base_query, draws)
    base_diffs = base_pred.pi_treated - base_pred.pi_untreated
    point = float(base_diffs.mean())
    posterior_var = float(base_diffs.var(ddof=1)) if base_diffs.size > 1 else 0.0

    target = UPosterior(history, t, spec)
    ref = draws.posterior_mean_params()
    mode, cov = target.laplace(ref)
    prop_chol = np.linalg.cholesky(cov + 1e-10 * np.eye(spec.q))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 707]))
    n_avail = draws.n_draws

    replicate_effects = np.empty(M)
    for m in range(M):
        params = draws.params_from(int(rng.integers(0, n_avail)))
        u = target.sample(params, rng, mode, prop_chol)
        x, z = (
            full_design(history.times, spec, history)
            if history.n_obs
            else (np.zeros((0, spec.p_pre + spec.p_post)), np.zeros((0, spec.q)))
        )
        mu = x @ params.beta_full + z @ u
        y_rep = mu + rng.normal(scale=np.sqrt(params.sigma2), size=mu.shape)
        rep_patient = replace(history, y=y_rep)
        rep_query = RiskQuery(
            patient=rep_patient, t=t, dt=dt, L=L, seed=int(rng.integers(0, 2**31))
        )
        rep_pred = predict_counterfactual_risk(rep_query, draws)
        replicate_effects[m] = float(np.mean(rep_pred.pi_treated - rep_pred.pi_untreated))
    resample_var = float(replicate_effects.var(ddof=1))
    qlo, qhi = np.quantile(base_diffs, [0.025, 0.975])
    return STEffectEstimate(
        effect_type="conditional",
        t=t,
        dt=dt,
        point=point,
        n_r=1,
        resample_var=resample_var,
        posterior_var=posterior_var,
        quantile_interval=(float(qlo), float(qhi)),
        per_draw=base_diffs,
        predicate=None,
    )
