import numpy as np
import pytest
from scipy import stats

from salvagejm.basis import SplineConfig
from salvagejm.core import ModelSpec, Params, PatientRecord
from salvagejm.inference import PosteriorDraws
from salvagejm.prediction import (
    RiskQuery,
    conditional_effect,
    predict_counterfactual_risk,
    sample_random_effects,
)

HAZ = SplineConfig(2, (5.0,), (0.0, 20.0))


def make_spec(**kw):
    base = dict(time_design="linear", form="M1", hazard_spline_m=HAZ, hazard_spline_d=HAZ)
    base.update(kw)
    return ModelSpec(**base)


def at_risk_patient(times=(0.5, 1.5, 2.5), ys=(0.2, 0.4, 0.5), t=3.0):
    times = np.asarray(times, dtype=float)
    return PatientRecord(
        id="q1",
        covariates={},
        times=times,
        y=np.asarray(ys, dtype=float),
        salvage_time=None,
        event_time=t,
        event=0,
    )


def constant_hazard_params(spec, hm=0.15, hd=0.08):
    p = Params.zeros(spec)
    p.psi_hm[:] = np.log(hm)
    p.psi_hd[:] = np.log(hd)
    p.alpha_m[:] = 0.0
    p.xi_m[:] = 0.0
    p.omega = np.diag([0.2, 0.05, 0.1, 0.02])
    return p


class TestSampleRandomEffects:
    def test_prior_recovery_without_data(self):
        # no measurements and a u-free survival factor leave the prior as target
        spec = make_spec()
        params = constant_hazard_params(spec)
        patient = at_risk_patient(times=(), ys=(), t=2.0)
        rng = np.random.default_rng(50)
        draws = sample_random_effects(patient, 2.0, spec, params, rng, n_draws=250)
        for j in range(spec.q):
            z = draws[:, j] / np.sqrt(params.omega[j, j])
            stat = stats.kstest(z, "norm").statistic
            assert stat < 0.12

    def test_degenerate_prior_concentrates(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.omega = np.eye(spec.q) * 1e-10
        patient = at_risk_patient()
        rng = np.random.default_rng(51)
        draws = sample_random_effects(patient, 3.0, spec, params, rng, n_draws=20)
        assert np.max(np.abs(draws)) < 1e-4

    def test_conjugate_conditional_mean(self):
        # Gaussian-only subcase: posterior mean of u is the ridge/BLUP formula
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.beta = np.array([0.3, 0.1])
        params.sigma2 = 0.05
        patient = at_risk_patient(times=(0.5, 1.0, 2.0, 2.8), ys=(0.9, 1.0, 1.3, 1.5), t=3.0)
        z = np.column_stack([np.ones(4), patient.times])
        x = z
        resid = patient.y - x @ params.beta
        omega_pre = params.omega[:2, :2]
        prec = z.T @ z / params.sigma2 + np.linalg.inv(omega_pre)
        blup = np.linalg.solve(prec, z.T @ resid / params.sigma2)
        rng = np.random.default_rng(52)
        draws = sample_random_effects(patient, 3.0, spec, params, rng, n_draws=400)
        for j in range(2):
            se = draws[:, j].std(ddof=1) / np.sqrt(len(draws))
            # MH autocorrelation inflates the naive SE; allow a generous factor
            assert abs(draws[:, j].mean() - blup[j]) < 5 * se + 0.02

    def test_nonfinite_start_rejected(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        patient = at_risk_patient(ys=(np.inf, 0.4, 0.5))
        rng = np.random.default_rng(53)
        with pytest.raises((FloatingPointError, ValueError)):
            sample_random_effects(patient, 3.0, spec, params, rng)


class TestPredictCounterfactualRisk:
    def _draws(self, spec, params):
        return PosteriorDraws.from_params(params, spec)

    def test_zero_horizon(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        draws = self._draws(spec, params)
        pred = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=0.0, L=1), draws
        )
        assert pred.point_treated == 0.0 and pred.point_untreated == 0.0
        eff = conditional_effect(RiskQuery(patient=at_risk_patient(), t=3.0, dt=0.0, L=1), draws)
        assert eff.point == 0.0

    def test_constant_hazard_closed_form(self):
        spec = make_spec()
        hm, hd, gm = 0.15, 0.08, -0.5
        params = constant_hazard_params(spec, hm, hd)
        params.gamma_m = gm
        draws = self._draws(spec, params)
        t, dt = 3.0, 2.0
        pred = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=t, dt=dt, L=1), draws
        )

        def cif(a, b):
            return a / (a + b) * (1.0 - np.exp(-(a + b) * dt))

        assert pred.pi_untreated[0] == pytest.approx(cif(hm, hd), abs=1e-9)
        assert pred.pi_treated[0] == pytest.approx(cif(hm * np.exp(gm), hd), abs=1e-9)

    def test_regime_equivalence(self):
        # no salvage main effect, aligned associations, block-diagonal omega and
        # zero post deviation: treated and untreated risks agree draw by draw
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.alpha_m[:] = 0.4
        params.xi_m[:] = 0.4
        params.gamma_m = 0.0
        params.beta = np.array([0.2, 0.1])
        params.beta_post[:] = 0.0
        draws = self._draws(spec, params)
        pred = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=2.0, L=1), draws
        )
        np.testing.assert_allclose(pred.pi_treated, pred.pi_untreated, atol=1e-12)

    def test_l_exceeding_draws(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        draws = self._draws(spec, params)
        with pytest.raises(ValueError):
            predict_counterfactual_risk(
                RiskQuery(patient=at_risk_patient(), t=3.0, dt=1.0, L=5), draws
            )
        pred = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=1.0, L=5, resample_draws=True), draws
        )
        assert pred.pi_treated.shape == (5,)

    def test_monotone_in_horizon(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.alpha_m[:] = 0.3
        params.beta = np.array([0.2, 0.1])
        draws = self._draws(spec, params)
        prev = -1.0
        for dt in (0.5, 1.0, 2.0, 4.0):
            pred = predict_counterfactual_risk(
                RiskQuery(patient=at_risk_patient(), t=3.0, dt=dt, L=1, seed=9), draws
            )
            assert pred.pi_untreated[0] >= prev - 1e-12
            prev = pred.pi_untreated[0]

    def test_stream_prefix_stability(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.alpha_m[:] = 0.3
        params.beta = np.array([0.2, 0.1])
        blocks = {k: np.repeat(v, 6, axis=1) for k, v in PosteriorDraws.from_params(params, spec).blocks.items()}
        draws = PosteriorDraws.from_params(params, spec)
        draws.blocks = blocks
        draws.u = np.zeros((1, 6, 0, spec.q))
        short = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=2.0, L=3, seed=4), draws
        )
        longer = predict_counterfactual_risk(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=2.0, L=6, seed=4), draws
        )
        np.testing.assert_array_equal(short.pi_treated, longer.pi_treated[:3])
        np.testing.assert_array_equal(short.pi_untreated, longer.pi_untreated[:3])

    def test_effect_bounds_and_salvage_benefit_direction(self):
        # hazard increasing in the biomarker, salvage lowers the trajectory,
        # aligned associations: effect <= 0 up to MC error
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.alpha_m[:] = 0.8
        params.xi_m[:] = 0.8
        params.gamma_m = 0.0
        params.beta = np.array([0.5, 0.15])
        params.beta_post = np.array([-1.0, 0.0])
        draws = PosteriorDraws.from_params(params, spec)
        eff = conditional_effect(
            RiskQuery(patient=at_risk_patient(), t=3.0, dt=3.0, L=1), draws
        )
        assert -1.0 <= eff.point <= 0.0

    def test_conditional_effect_single_draw_identity(self):
        spec = make_spec()
        params = constant_hazard_params(spec)
        params.gamma_m = -0.4
        draws = PosteriorDraws.from_params(params, spec)
        q = RiskQuery(patient=at_risk_patient(), t=3.0, dt=2.0, L=1, seed=5)
        pred = predict_counterfactual_risk(q, draws)
        eff = conditional_effect(q, draws)
        assert eff.point == pytest.approx(
            float(pred.pi_treated[0] - pred.pi_untreated[0]), abs=1e-12
        )

    def test_two_draw_mean(self):
        spec = make_spec()
        p1 = constant_hazard_params(spec, hm=0.15)
        draws = PosteriorDraws.from_params(p1, spec)
        # two distinct parameter draws: different salvage effects
        for name in draws.blocks:
            draws.blocks[name] = np.repeat(draws.blocks[name], 2, axis=1)
        draws.blocks["gamma_m"][0, 0, 0] = -0.6
        draws.blocks["gamma_m"][0, 1, 0] = -0.2
        draws.u = np.zeros((1, 2, 0, spec.q))
        q = RiskQuery(patient=at_risk_patient(), t=3.0, dt=2.0, L=2, seed=6)
        pred = predict_counterfactual_risk(q, draws)
        eff = conditional_effect(q, draws)
        diffs = pred.pi_treated - pred.pi_untreated
        assert eff.point == pytest.approx(float(diffs.mean()), abs=1e-12)
        assert diffs[0] != diffs[1]

    def test_salvage_already_started_rejected(self):
        with pytest.raises(ValueError):
            RiskQuery(
                patient=PatientRecord(
                    id="x", covariates={}, times=np.array([1.0]), y=np.array([0.3]),
                    salvage_time=2.0, event_time=9.0, event=0,
                ),
                t=3.0,
                dt=1.0,
            )
