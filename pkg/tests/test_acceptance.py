"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Long-running recovery criteria run in their smoke variants by default; set
SALVAGEJM_FULL_ACCEPTANCE=1 for the full-scale versions (hours).
"""

import json
import os
import subprocess
import sys
from contextlib import contextmanager

import numpy as np
import pytest

from salvagejm.basis import SplineConfig, basis_matrix
from salvagejm.causal import HistoryPredicate, marginal_effect, variance_conditional, variance_marginal
from salvagejm.core import ModelSpec, Params, PatientRecord
from salvagejm.inference import (
    McmcConfig,
    PosteriorDraws,
    PriorSpec,
    rhat_summary,
    run_mcmc,
)
from salvagejm.prediction import RiskQuery, conditional_effect
from salvagejm.simulator import ScenarioSpec, scenario_model_spec, scenario_true_params, simulate_dataset
from salvagejm.survival import (
    Regime,
    cif_window_from_hazards,
    cumulative_hazard,
    death_hazard_fn,
    hazard_metastasis,
    hazard_ratio_salvage,
    metastasis_hazard_fn,
)

FULL = bool(os.environ.get("SALVAGEJM_FULL_ACCEPTANCE"))

RECOVERY_PRIORS = PriorSpec(
    sigma2_shape=0.01, sigma2_rate=0.01, omega_var_shape=0.01, omega_var_rate=0.01
)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE FAIL: {name}", flush=True)
        raise
    print(f"\nACCEPTANCE PASS: {name}", flush=True)


# -- criterion 1 -------------------------------------------------------------


def test_quadrature_oracle():
    with criterion("quadrature oracle (GK15 vs 1e6-point trapezoid)"):
        rng = np.random.default_rng(100)
        for rep in range(50):
            degree = int(rng.integers(1, 4))
            nint = int(rng.integers(1, 6))
            hi = float(rng.uniform(5.0, 18.0))
            cfg = SplineConfig(degree, tuple(np.sort(rng.uniform(0.3, hi - 0.3, nint))), (0.0, hi))
            coef = rng.normal(scale=0.5, size=cfg.dim)

            def hazard(ts, cfg=cfg, coef=coef):
                return np.exp(basis_matrix(ts, cfg) @ coef)

            a = float(rng.uniform(0.0, hi / 3))
            b = float(rng.uniform(a + 0.5, hi))
            ts = np.linspace(a, b, 1_000_001)
            oracle = np.trapezoid(hazard(ts), ts)
            got = cumulative_hazard(a, b, hazard, subdivide=True)
            assert got == pytest.approx(oracle, rel=1e-6), f"config {rep}"
        # constant and linear integrands are exact
        got = cumulative_hazard(0.3, 2.3, lambda ts: np.full_like(ts, 0.37))
        assert got == pytest.approx(0.74, abs=1e-12)
        got = cumulative_hazard(0.0, 2.0, lambda ts: 3.0 * ts + 0.5)
        assert got == pytest.approx(7.0, abs=1e-12)


# -- criterion 2 -------------------------------------------------------------


def test_constant_hazard_cif_oracle():
    with criterion("constant-hazard CIF oracle (200-point grid)"):
        hms = np.array([0.01, 0.05, 0.12, 0.3, 0.8])
        hds = np.array([0.005, 0.02, 0.1, 0.5])
        dts = np.array([0.1, 0.5, 1.0, 2.0, 3.5, 5.0, 7.5, 10.0, 15.0, 20.0])
        count = 0
        for hm in hms:
            for hd in hds:
                for dt in dts:
                    expected = hm / (hm + hd) * (1.0 - np.exp(-(hm + hd) * dt))
                    got = cif_window_from_hazards(
                        1.0, dt,
                        lambda ts, v=hm: np.full_like(ts, v),
                        lambda ts, v=hd: np.full_like(ts, v),
                    )
                    assert got == pytest.approx(expected, abs=1e-8), (hm, hd, dt)
                    count += 1
        assert count == 200


# -- criterion 3 -------------------------------------------------------------


def test_conjugate_posterior_recovery():
    with criterion("conjugate Gaussian posterior recovery (50 subjects, 10k draws)"):
        rng = np.random.default_rng(101)
        spec = ModelSpec(
            time_design="linear", form="M1", survival_enabled=False,
            hazard_spline_m=None, hazard_spline_d=None,
        )
        sigma2 = 0.09
        omega = np.diag([0.09, 0.02, 0.04, 0.01])
        omega[0, 1] = omega[1, 0] = 0.006
        beta_true = np.array([0.5, 0.15])
        pats, xs, ys, vs = [], [], [], []
        for i in range(50):
            ts = np.sort(rng.uniform(0.2, 9.5, size=5))
            z = np.column_stack([np.ones(5), ts])
            u = rng.multivariate_normal(np.zeros(4), omega)
            y = z @ (beta_true + u[:2]) + rng.normal(scale=np.sqrt(sigma2), size=5)
            pats.append(PatientRecord(
                id=f"c{i}", covariates={}, times=ts, y=y,
                salvage_time=None, event_time=10.0, event=0,
            ))
            xs.append(z)
            ys.append(y)
            vs.append(z @ omega[:2, :2] @ z.T + sigma2 * np.eye(5))
        prior_sd = 10.0
        prec = np.eye(2) / prior_sd**2
        rhs = np.zeros(2)
        for x, y, v in zip(xs, ys, vs):
            vi = np.linalg.inv(v)
            prec += x.T @ vi @ x
            rhs += x.T @ vi @ y
        post_cov = np.linalg.inv(prec)
        post_mean = post_cov @ rhs

        cfg = McmcConfig(chains=2, warmup=1500, keep=5000, seed=31,
                         fixed={"sigma2": sigma2, "omega": omega})
        draws = run_mcmc(pats, spec, PriorSpec(coef_sd=prior_sd), cfg)
        beta = draws.flat("beta")
        assert beta.shape[0] == 10_000
        for j in range(2):
            batches = beta[:, j].reshape(40, -1).mean(axis=1)
            se = batches.std(ddof=1) / np.sqrt(40)
            err = abs(beta[:, j].mean() - post_mean[j])
            assert err < 3 * se, f"beta[{j}]: err={err:.5f} 3se={3*se:.5f}"
        emp = np.cov(beta.T)
        rel = np.linalg.norm(emp - post_cov) / np.linalg.norm(post_cov)
        assert rel < 0.10, f"covariance Frobenius rel err {rel:.3f}"


# -- criteria 4, 6, 7: simulation recovery and variance studies --------------


def _fit_replicate(rep_seed, n, mcmc_seed, chains, warmup, keep):
    pats, truth = simulate_dataset(ScenarioSpec(scenario=1, n=n, seed=rep_seed))
    cfg = McmcConfig(chains=chains, warmup=warmup, keep=keep, seed=mcmc_seed)
    draws = run_mcmc(pats, truth.spec, RECOVERY_PRIORS, cfg)
    return pats, truth, draws


GATED = ("alpha_m1", "gamma_m", "sigma2", "beta0", "beta1", "drop", "post_slope")


def _gated_estimates(draws):
    return {
        "alpha_m1": draws.flat("alpha_m")[:, 0],
        "gamma_m": draws.flat("gamma_m")[:, 0],
        "sigma2": draws.flat("sigma2")[:, 0],
        "beta0": draws.flat("beta")[:, 0],
        "beta1": draws.flat("beta")[:, 1],
        "drop": draws.flat("beta_post")[:, 0],
        "post_slope": draws.flat("beta_post")[:, 1],
    }


def _gated_truth(params):
    return {
        "alpha_m1": params.alpha_m[0],
        "gamma_m": params.gamma_m,
        "sigma2": params.sigma2,
        "beta0": params.beta[0],
        "beta1": params.beta[1],
        "drop": params.beta_post[0],
        "post_slope": params.beta_post[1],
    }


@pytest.fixture(scope="module")
def recovery_fits():
    if FULL:
        n, reps, chains, warmup, keep = 500, 25, 3, 3000, 3000
    else:
        n, reps, chains, warmup, keep = 200, 5, 2, 1500, 1500
    fits = []
    for r in range(reps):
        fits.append(_fit_replicate(1000 + r, n, 7000 + r, chains, warmup, keep))
    return fits


def test_simulation_recovery(recovery_fits):
    scale = "full (n=500, 25 reps)" if FULL else "smoke (n=200, 5 reps)"
    tol = 0.10 if FULL else 0.20
    with criterion(f"simulation-study recovery {scale}, relative bias < {tol:.0%}"):
        ests = {k: [] for k in GATED}
        covered = {k: 0 for k in GATED}
        rhat_ok = 0
        truth_vals = None
        for pats, truth, draws in recovery_fits:
            truth_vals = _gated_truth(truth.params)
            g = _gated_estimates(draws)
            for k in GATED:
                ests[k].append(g[k].mean())
                lo, hi = np.quantile(g[k], [0.025, 0.975])
                covered[k] += int(lo <= truth_vals[k] <= hi)
            rs = rhat_summary(draws)
            rhat_ok += int(max(rs.values()) < 1.1)
        report = {}
        for k in GATED:
            bias = (np.mean(ests[k]) - truth_vals[k]) / truth_vals[k]
            report[k] = round(float(bias), 4)
        print(f"\n  relative biases: {report}")
        print(f"  interval coverage: {covered} of {len(recovery_fits)}")
        print(f"  rhat<1.1 in {rhat_ok}/{len(recovery_fits)} replicates")
        for k, bias in report.items():
            assert abs(bias) < tol, f"{k}: relative bias {bias:+.3f} exceeds {tol}"
        if FULL:
            reps = len(recovery_fits)
            for k in GATED:
                assert covered[k] >= 21, f"{k}: coverage {covered[k]}/{reps} < 21/25"
            assert rhat_ok >= 23, f"rhat<1.1 in only {rhat_ok}/{reps} replicates"


# -- criterion 5 -------------------------------------------------------------


def test_causal_plugin_oracle():
    with criterion("causal plug-in oracle (degenerate posterior vs brute force)"):
        spec = scenario_model_spec(1)
        base = scenario_true_params(spec, 1)
        t, dt = 5.0, 2.0

        # constant-hazard configuration: closed form to 1e-6
        p = base.copy()
        p.alpha_m[:] = 0.0
        p.xi_m[:] = 0.0
        hm, hd, gm = 0.05, 0.02, -0.7
        p.psi_hm[:] = np.log(hm)
        p.psi_hd[:] = np.log(hd)
        p.gamma_m = gm
        p.gamma_d = 0.0
        pats, truth = simulate_dataset(ScenarioSpec(scenario=1, n=80, seed=42, params=p))
        draws = PosteriorDraws.from_params(p, spec)
        plugin = {pat.id: truth.u[i] for i, pat in enumerate(pats)}
        est = marginal_effect(pats, t, dt, draws, plugin_u=plugin, seed=1)

        def cif(a, b):
            return a / (a + b) * (1 - np.exp(-(a + b) * dt))

        expected = cif(hm * np.exp(gm), hd) - cif(hm, hd)
        assert est.point == pytest.approx(expected, abs=1e-6)

        # biomarker-driven configuration: dense-grid brute force per patient
        p2 = scenario_true_params(spec, 1)
        pats2, truth2 = simulate_dataset(ScenarioSpec(scenario=1, n=60, seed=43, params=p2))
        draws2 = PosteriorDraws.from_params(p2, spec)
        plugin2 = {pat.id: truth2.u[i] for i, pat in enumerate(pats2)}
        est2 = marginal_effect(pats2, t, dt, draws2, plugin_u=plugin2, seed=1)

        from salvagejm.core import truncate_history

        grid = np.linspace(t, t + dt, 4001)
        effects = []
        for i, pat in enumerate(pats2):
            if pat.event_time <= t or (pat.salvage_time is not None and pat.salvage_time <= t):
                continue
            hist = truncate_history(pat, t)
            u = truth2.u[i]
            diffs = []
            for regime in (Regime.treated_at(t), Regime.untreated()):
                hmf = metastasis_hazard_fn(hist, spec, p2, u, regime)
                hdf = death_hazard_fn(hist, spec, p2, regime)
                hm_g = hmf(grid)
                tot = hm_g + hdf(grid)
                inner = np.concatenate([[0.0], np.cumsum((tot[1:] + tot[:-1]) / 2 * np.diff(grid))])
                integrand = hm_g * np.exp(-inner)
                diffs.append(np.trapezoid(integrand, grid))
            effects.append(diffs[0] - diffs[1])
        brute = float(np.mean(effects))
        assert est2.n_r == len(effects)
        assert est2.point == pytest.approx(brute, abs=5e-5)


@pytest.fixture(scope="module")
def variance_study():
    if FULL:
        reps, n, chains, warmup, keep, m_resamples, L = 100, 200, 2, 1500, 1500, 200, 200
    else:
        reps, n, chains, warmup, keep, m_resamples, L = 20, 120, 2, 700, 700, 60, 50
    t, dt = 5.0, 2.0
    pred = HistoryPredicate(kind="last_value_above", threshold=0.5)
    rows = []
    for r in range(reps):
        pats, truth, draws = _fit_replicate(5000 + r, n, 9000 + r, chains, warmup, keep)
        plugin = {pat.id: truth.u[i] for i, pat in enumerate(pats)}
        truth_draws = PosteriorDraws.from_params(truth.params, truth.spec)
        truth_effect = marginal_effect(pats, t, dt, truth_draws, plugin_u=plugin, seed=1).point
        est = variance_marginal(pats, t, dt, draws, M=m_resamples, seed=r, L=L)
        est_mc = variance_marginal(
            pats, t, dt, draws, predicate=pred, M=m_resamples, seed=r, L=L
        )
        rs_ids = [p.id for p in pats
                  if p.event_time > t and (p.salvage_time is None or p.salvage_time > t)]
        target = next(p for p in pats if p.id == rs_ids[0])
        est_c = variance_conditional(target, t, dt, draws, M=8 if not FULL else 40, seed=r, L=L)
        rows.append({
            "truth": truth_effect,
            "marginal": est,
            "marginal_conditional": est_mc,
            "conditional": est_c,
        })
    return rows


def test_variance_decomposition_and_coverage(variance_study):
    scale = "full (100 reps)" if FULL else "smoke (20 reps)"
    with criterion(f"variance decomposition + corrected-interval coverage {scale}"):
        covered = 0
        for row in variance_study:
            est = row["marginal"]
            assert est.total_var == est.resample_var + est.posterior_var
            lo, hi = est.normal_interval
            covered += int(lo <= row["truth"] <= hi)
        n = len(variance_study)
        print(f"\n  corrected-interval coverage: {covered}/{n}")
        if FULL:
            assert covered >= 90, f"coverage {covered}/100 below 90"
        else:
            # binomially consistent screen for the 95% target at 20 replicates
            assert covered >= 16, f"coverage {covered}/{n} below 16/20"


def test_variance_ordering(variance_study):
    with criterion("variance ordering ST^M <= ST^MC <= ST^C (mean over replicates)"):
        vm = np.mean([r["marginal"].total_var for r in variance_study])
        vmc = np.mean([r["marginal_conditional"].total_var for r in variance_study])
        vc = np.mean([r["conditional"].total_var for r in variance_study])
        print(f"\n  mean total variance: M={vm:.3e} MC={vmc:.3e} C={vc:.3e}")
        assert vm <= vmc <= vc


# -- criterion 8 -------------------------------------------------------------


def test_hr_identities_and_determinism(tmp_path):
    with criterion("HR/regime-equivalence identities and byte-identical determinism"):
        haz = SplineConfig(2, (5.0,), (0.0, 20.0))
        spec = ModelSpec(time_design="linear", form="M1",
                         hazard_spline_m=haz, hazard_spline_d=haz)
        patient = PatientRecord(
            id="h", covariates={}, times=np.array([0.5]), y=np.array([0.4]),
            salvage_time=3.0, event_time=10.0, event=0,
        )
        params = Params.zeros(spec)
        params.psi_hm[:] = np.log(0.1)
        params.psi_hd[:] = np.log(0.05)
        params.beta = np.array([0.3, 0.1])
        u = np.array([0.1, 0.05, 0.0, 0.0])

        # HR cancellation identity: aligned associations, no deviation
        params.alpha_m[:] = 0.7
        params.xi_m[:] = 0.7
        params.gamma_m = 0.0
        params.beta_post[:] = 0.0
        assert hazard_ratio_salvage(6.0, patient, spec, params, u) == pytest.approx(1.0, abs=1e-12)
        # scalar identity
        params.alpha_m[:] = 0.0
        params.xi_m[:] = 0.0
        params.gamma_m = np.log(2.0)
        assert hazard_ratio_salvage(6.0, patient, spec, params, u) == pytest.approx(2.0, abs=1e-12)
        # regime equivalence: untreated vs observed pre-salvage
        params.alpha_m[:] = 0.5
        h_obs = hazard_metastasis(2.0, patient, spec, params, u, Regime.observed())
        h_un = hazard_metastasis(2.0, patient, spec, params, u, Regime.untreated())
        assert h_obs == pytest.approx(h_un, rel=1e-14)

        # determinism: simulate + fit + effects twice, byte identical
        from salvagejm.cli import main

        def run(outdir):
            sim = tmp_path / f"{outdir}_sim"
            fit = tmp_path / f"{outdir}_fit"
            eff = tmp_path / f"{outdir}_eff"
            assert main(["simulate", "--n", "30", "--seed", "3", "--out", str(sim)]) == 0
            assert main([
                "fit", "--measurements", str(sim / "measurements.csv"),
                "--outcomes", str(sim / "outcomes.csv"), "--schema", str(sim / "schema.json"),
                "--chains", "1", "--warmup", "40", "--keep", "30", "--seed", "5",
                "--out", str(fit),
            ]) == 0
            assert main([
                "effects", "--fit", str(fit),
                "--measurements", str(sim / "measurements.csv"),
                "--outcomes", str(sim / "outcomes.csv"), "--schema", str(sim / "schema.json"),
                "--t", "5", "--dt", "2", "--mc-draws", "10", "--seed", "6",
                "--out", str(eff),
            ]) == 0
            return [
                (sim / "measurements.csv").read_bytes(),
                (fit / "draws.npz").read_bytes(),
                (eff / "effects.json").read_bytes(),
            ]

        assert run("a") == run("b")


# -- criterion 9 -------------------------------------------------------------


def test_effects_cli_reporting_layout(tmp_path):
    with criterion("effects CLI layout: one row per t in {5,7,9,13}, dt=2, threshold 0.5"):
        from salvagejm.cli import main

        sim = tmp_path / "sim"
        fit = tmp_path / "fit"
        eff = tmp_path / "eff"
        assert main(["simulate", "--n", "60", "--seed", "11", "--out", str(sim)]) == 0
        assert main([
            "fit", "--measurements", str(sim / "measurements.csv"),
            "--outcomes", str(sim / "outcomes.csv"), "--schema", str(sim / "schema.json"),
            "--chains", "1", "--warmup", "60", "--keep", "40", "--seed", "2",
            "--out", str(fit),
        ]) == 0
        assert main([
            "effects", "--fit", str(fit),
            "--measurements", str(sim / "measurements.csv"),
            "--outcomes", str(sim / "outcomes.csv"), "--schema", str(sim / "schema.json"),
            "--t", "5,7,9,13", "--dt", "2", "--predicate", "last-value-above:0.5",
            "--types", "marginal,marginal-conditional", "--mc-draws", "15", "--seed", "4",
            "--out", str(eff),
        ]) == 0
        records = json.loads((eff / "effects.json").read_text())
        mc_rows = [r for r in records if r["effect_type"] == "marginal-conditional"]
        m_rows = [r for r in records if r["effect_type"] == "marginal"]
        assert sorted(r["t"] for r in mc_rows) == [5.0, 7.0, 9.0, 13.0]
        assert sorted(r["t"] for r in m_rows) == [5.0, 7.0, 9.0, 13.0]
        for r in mc_rows:
            assert r["dt"] == 2.0
            assert r["predicate"] == "last_value_above(0.5)"
            assert r["n_r"] is not None and r["n_r"] > 0
            assert r["quantile_interval"] is not None
        plot = (eff / "effects_plotdata.csv").read_text().splitlines()
        assert len(plot) == 1 + len(records)
