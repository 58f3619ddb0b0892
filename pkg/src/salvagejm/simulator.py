"""Synthetic cohorts with PSA-driven (confounded) salvage initiation.

Each subject gets uniform visit times on the follow-up window, a biomarker
path from the change-point mixed model, a salvage decision at each visit by a
Bernoulli draw whose probability depends on the current PSA (the rung
schedule), and competing event times by inverting the cause-specific
cumulative hazards. Because the salvage decision depends only on observed
biomarker values, the design induces confounding by indication while staying
exactly consistent with the fitted model.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import ModelSpec, Params, PatientRecord, cov_vector
from .basis import SplineConfig
from .longitudinal import post_design, pre_design
from .survival import Regime, death_hazard_fn, fixed_quadrature, metastasis_hazard_fn

__all__ = [
    "ScenarioSpec",
    "GroundTruth",
    "scenario_model_spec",
    "scenario_true_params",
    "simulate_visits",
    "simulate_treatment",
    "simulate_events",
    "simulate_dataset",
]

RUNG_THRESHOLDS = (2.0, 4.0)  # ng/mL
RUNG_PROBS = (0.01, 0.5, 0.9)

SCENARIO_FEATURES = {
    1: (("value",), ("value",)),
    2: (("value", "slope"), ("value",)),
    3: (("value", "average"), ("value",)),
}


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: int = 1
    n: int = 1000
    window: tuple[float, float] = (0.0, 20.0)
    thresholds: tuple[float, float] = RUNG_THRESHOLDS
    probs: tuple[float, float, float] = RUNG_PROBS
    visit_mean: float = 10.0  # visits per subject: 1 + Poisson(visit_mean)
    seed: int = 0
    params: Params | None = None  # defaults to scenario_true_params
    # fixed per-visit salvage probability replacing the PSA rungs; used to
    # build an unconfounded comparison cohort
    randomize_probability: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIO_FEATURES:
            raise ValueError("scenario must be 1, 2 or 3")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if any(not 0 <= p <= 1 for p in self.probs):
            raise ValueError("rung probabilities must be in [0, 1]")
        if not self.thresholds[0] < self.thresholds[1]:
            raise ValueError("rung thresholds must increase")


@dataclass
class GroundTruth:
    params: Params
    spec: ModelSpec
    u: np.ndarray  # (n, q)
    scenario: int
    seed: int


def scenario_model_spec(scenario: int, window=(0.0, 20.0)) -> ModelSpec:
    """Simplified truth structure: linear trajectories, no extra covariates."""
    pre, post = SCENARIO_FEATURES[scenario]
    haz = SplineConfig(2, (window[1] / 4.0, window[1] / 2.0, 3.0 * window[1] / 4.0), window)
    return ModelSpec(
        time_design="linear",
        covariates=(),
        post_design="drop_slope",
        form="custom",
        pre_features=pre,
        post_features=post,
        hazard_spline_m=haz,
        hazard_spline_d=haz,
    )


def scenario_true_params(spec: ModelSpec, scenario: int) -> Params:
    """Defaults tuned for roughly 10-15% metastasis incidence over 20 years.

    Magnitudes are deliberately away from zero (salvage drops the biomarker
    close to its floor, associations are strong) so every reported parameter
    is well identified in recovery studies at moderate cohort sizes.
    """
    p = Params.zeros(spec)
    p.beta = np.array([0.1, 0.08])
    p.beta_post = np.array([-1.1, 0.10])
    p.sigma2 = 0.04
    p.omega = np.array(
        [
            [0.090, 0.0030, 0.010, 0.0000],
            [0.0030, 0.0049, 0.000, 0.0010],
            [0.010, 0.0000, 0.160, 0.0000],
            [0.0000, 0.0010, 0.000, 0.0300],
        ]
    )
    p.psi_hm[:] = -5.5
    p.psi_hd[:] = -4.9
    p.gamma_m = -1.0
    p.gamma_d = 0.1
    if scenario == 1:
        p.alpha_m = np.array([1.0])
    elif scenario == 2:
        p.alpha_m = np.array([0.9, 1.5])
    else:
        p.alpha_m = np.array([0.9, 0.4])
    p.xi_m = np.array([0.8])
    p.tau_m = p.tau_d = 100.0
    return p


def simulate_visits(n: int, window, rng, visit_mean: float = 10.0) -> list:
    """Sorted uniform visit schedules; one guaranteed visit per subject."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = window
    out = []
    for _ in range(n):
        count = 1 + rng.poisson(visit_mean)
        out.append(np.sort(rng.uniform(lo, hi, size=count)))
    return out


def rung_probability(psa, thresholds=RUNG_THRESHOLDS, probs=RUNG_PROBS):
    """Salvage probability at a visit given the current PSA (ng/mL).

    Rungs are psa < lo, lo <= psa <= hi, psa > hi (both thresholds belong to
    the middle rung).
    """
    psa = np.asarray(psa, dtype=float)
    idx = (psa >= thresholds[0]).astype(int) + (psa > thresholds[1]).astype(int)
    return np.asarray(probs, dtype=float)[idx]


def simulate_treatment(times, psa_values, rng, thresholds=RUNG_THRESHOLDS, probs=RUNG_PROBS):
    """First visit whose rung-probability Bernoulli draw succeeds, or None."""
    times = np.asarray(times, dtype=float)
    psa_values = np.asarray(psa_values, dtype=float)
    for t, psa in zip(times, psa_values):
        if rng.uniform() < rung_probability(psa, thresholds, probs):
            return float(t)
    return None


def simulate_events(patient: PatientRecord, spec, params, u, rng, horizon: float):
    """(T, delta) by inverse transform on the cause-specific cumulative hazards.

    Independent unit-exponential draws per cause; the hazard uses the
    patient's salvage time (its observed regime). If a cumulative hazard
    never reaches the draw by the horizon the subject is censored there.
    """
    hm = metastasis_hazard_fn(patient, spec, params, u, Regime.observed())
    hd = death_hazard_fn(patient, spec, params, Regime.observed())
    s = patient.salvage_time

    def cum(hazard, t):
        if t <= 0:
            return 0.0
        pieces = [(0.0, t)] if s is None or s >= t else [(0.0, s), (s, t)]
        total = 0.0
        for a, b in pieces:
            nodes, weights = fixed_quadrature(a, b)
            total += float(weights @ hazard(nodes))
        return total

    def invert(hazard):
        e = rng.exponential()
        if cum(hazard, horizon) < e:
            return horizon, False
        lo, hi = 0.0, horizon
        while hi - lo > 1e-8:
            mid = 0.5 * (lo + hi)
            if cum(hazard, mid) < e:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi), True

    t_m, hit_m = invert(hm)
    t_d, hit_d = invert(hd)
    if not hit_m and not hit_d:
        return horizon, 0
    if t_m <= t_d:
        return (t_m, 1) if hit_m else (horizon, 0)
    return (t_d, 2) if hit_d else (horizon, 0)


def simulate_dataset(scenario_spec: ScenarioSpec):
    """Full cohort plus the ground-truth record (true parameters and effects)."""
    spec = scenario_model_spec(scenario_spec.scenario, scenario_spec.window)
    params = scenario_spec.params if scenario_spec.params is not None else scenario_true_params(
        spec, scenario_spec.scenario
    )
    params.validate(spec)
    rng = np.random.default_rng(np.random.SeedSequence(scenario_spec.seed))
    n = scenario_spec.n
    horizon = scenario_spec.window[1]
    chol = np.linalg.cholesky(params.omega)
    u_all = (chol @ rng.standard_normal((spec.q, n))).T
    visits = simulate_visits(n, scenario_spec.window, rng, scenario_spec.visit_mean)

    patients = []
    cov = np.zeros(0)
    for i in range(n):
        ts = visits[i]
        u = u_all[i]
        # biomarker path and visit-by-visit salvage decision
        y = np.empty(ts.shape[0])
        s = None
        for j, t in enumerate(ts):
            if s is None or t <= s:
                x, z = pre_design([t], spec, cov)
                mu = float(x[0] @ params.beta + z[0] @ u[: spec.q_pre])
            else:
                x, z = pre_design([t], spec, cov)
                xq, zq = post_design([t], spec, s, cov)
                mu = float(
                    x[0] @ params.beta
                    + z[0] @ u[: spec.q_pre]
                    + xq[0] @ params.beta_post
                    + zq[0] @ u[spec.q_pre :]
                )
            y[j] = mu + rng.normal(scale=np.sqrt(params.sigma2))
            if scenario_spec.randomize_probability is not None:
                p_salvage = scenario_spec.randomize_probability
            else:
                p_salvage = rung_probability(
                    float(np.expm1(y[j])), scenario_spec.thresholds, scenario_spec.probs
                )
            if s is None and rng.uniform() < p_salvage:
                s = float(t)
        shell = PatientRecord(
            id=f"sim{i:05d}",
            covariates={},
            times=np.array([]),
            y=np.array([]),
            salvage_time=s,
            event_time=horizon,
            event=0,
        )
        t_obs, delta = simulate_events(shell, spec, params, u, rng, horizon)
        s_obs = s if (s is not None and s < t_obs) else None
        keep = ts <= t_obs
        patients.append(
            PatientRecord(
                id=f"sim{i:05d}",
                covariates={},
                times=ts[keep],
                y=y[keep],
                salvage_time=s_obs,
                event_time=t_obs,
                event=delta,
            )
        )
    truth = GroundTruth(
        params=params, spec=spec, u=u_all, scenario=scenario_spec.scenario, seed=scenario_spec.seed
    )
    return patients, truth
