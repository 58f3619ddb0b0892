"""Posterior density, MCMC sampler, convergence diagnostics, information criteria.

The sampler is adaptive random-walk Metropolis-Hastings within Gibbs. Blocks:
one multivariate move per regression block, log-scale scalar moves for the
variance and smoothing parameters, an unconstrained Cholesky-factor move for
the random-effects covariance, and a vectorized per-subject move for the
random effects (conditionally independent given the parameters). Proposal
scales adapt during warmup only (targets 0.234 multivariate, 0.44 scalar);
the post-warmup kernel is fixed.

Likelihood evaluations run on designs precomputed at fixed composite
Gauss-Kronrod nodes (see survival.fixed_quadrature), so one evaluation is a
handful of matrix products. The treatment-assignment process contributes no
factor anywhere, which is what licenses causal use of the fitted model.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .basis import difference_penalty
from .core import ModelSpec, Params, PatientRecord, cov_vector
from .longitudinal import feature_designs, full_design
from .survival import fixed_quadrature
from .basis import basis_matrix

__all__ = [
    "PriorSpec",
    "McmcConfig",
    "PosteriorDraws",
    "FitData",
    "log_prior",
    "log_likelihood",
    "log_posterior",
    "run_mcmc",
    "rhat",
    "rhat_summary",
    "information_criteria",
    "InformationCriteria",
]

TARGET_ACC_VECTOR = 0.234
TARGET_ACC_SCALAR = 0.44


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters; block_overrides maps block name -> (mean, sd)."""

    coef_mean: float = 0.0
    coef_sd: float = 10.0
    sigma2_shape: float = 0.1
    sigma2_rate: float = 0.1
    omega_var_shape: float = 0.1
    omega_var_rate: float = 0.1
    lkj_shape: float = 2.0
    tau_shape: float = 5.0
    tau_rate: float = 0.05
    penalty_order: int = 2
    block_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in [
            ("coef_sd", self.coef_sd),
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_rate", self.sigma2_rate),
            ("omega_var_shape", self.omega_var_shape),
            ("omega_var_rate", self.omega_var_rate),
            ("tau_shape", self.tau_shape),
            ("tau_rate", self.tau_rate),
        ]:
            if v <= 0:
                raise ValueError(f"prior hyperparameter {name} must be > 0")
        if self.lkj_shape < 1:
            raise ValueError("LKJ shape must be >= 1")
        if self.penalty_order < 1:
            raise ValueError("penalty order must be >= 1")

    def normal_block(self, name: str) -> tuple[float, float]:
        return self.block_overrides.get(name, (self.coef_mean, self.coef_sd))

    def to_dict(self) -> dict:
        return {
            "coef_mean": self.coef_mean,
            "coef_sd": self.coef_sd,
            "sigma2_shape": self.sigma2_shape,
            "sigma2_rate": self.sigma2_rate,
            "omega_var_shape": self.omega_var_shape,
            "omega_var_rate": self.omega_var_rate,
            "lkj_shape": self.lkj_shape,
            "tau_shape": self.tau_shape,
            "tau_rate": self.tau_rate,
            "penalty_order": self.penalty_order,
            "block_overrides": {k: list(v) for k, v in self.block_overrides.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "PriorSpec":
        d = dict(d)
        d["block_overrides"] = {k: tuple(v) for k, v in d.get("block_overrides", {}).items()}
        return PriorSpec(**d)


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 3
    warmup: int = 3000
    keep: int = 3000
    thin: int = 1
    seed: int = 0
    fixed: dict = field(default_factory=dict)  # block name -> pinned value
    interweave: bool = True  # covariance-factor interweaving moves
    recenter: bool = True  # fixed/random recentering moves

    def __post_init__(self):
        if min(self.chains, self.warmup, self.keep, self.thin) < 1:
            raise ValueError("chains, warmup, keep and thin must be positive")


# ---------------------------------------------------------------------------
# precomputed designs


class FitData:
    """Designs and quadrature layouts precomputed once per (data, spec)."""

    def __init__(self, patients, spec: ModelSpec, panel_length: float = 5.0):
        if isinstance(patients, PatientRecord):
            raise TypeError("patients must be a sequence of PatientRecord")
        self.patients = list(patients)
        self.spec = spec
        self.n = len(self.patients)
        n, q = self.n, spec.q
        p = spec.p_pre + spec.p_post

        # longitudinal stack
        xs, zs, ys, subj = [], [], [], []
        for i, pat in enumerate(self.patients):
            if pat.n_obs:
                x, z = full_design(pat.times, spec, pat)
                xs.append(x)
                zs.append(z)
                ys.append(pat.y)
                subj.append(np.full(pat.n_obs, i))
        self.X = np.vstack(xs) if xs else np.zeros((0, p))
        self.Z = np.vstack(zs) if zs else np.zeros((0, q))
        self.y = np.concatenate(ys) if ys else np.zeros(0)
        self.obs_subj = np.concatenate(subj).astype(int) if subj else np.zeros(0, dtype=int)
        self.obs_count = np.bincount(self.obs_subj, minlength=n).astype(float)

        self.delta = np.array([pat.event for pat in self.patients], dtype=int)
        if not spec.survival_enabled:
            return

        # survival quadrature stack: nodes over [0, T], split at S
        node_t, node_w, node_subj, node_post, node_dur = [], [], [], [], []
        for i, pat in enumerate(self.patients):
            t_end = pat.event_time
            s = pat.salvage_time
            segments = [(0.0, t_end)] if s is None else [(0.0, s), (s, t_end)]
            for a, b in segments:
                if b <= a:
                    continue
                ts, ws = fixed_quadrature(a, b, panel_length)
                node_t.append(ts)
                node_w.append(ws)
                node_subj.append(np.full(ts.shape[0], i))
                post = np.zeros(ts.shape[0], dtype=bool) if s is None else ts >= s
                node_post.append(post)
                node_dur.append(np.where(post, ts - (s if s is not None else 0.0), 0.0))
        self.node_t = np.concatenate(node_t) if node_t else np.zeros(0)
        self.node_w = np.concatenate(node_w) if node_w else np.zeros(0)
        self.node_subj = (
            np.concatenate(node_subj).astype(int) if node_subj else np.zeros(0, dtype=int)
        )
        self.node_post = (
            np.concatenate(node_post) if node_post else np.zeros(0, dtype=bool)
        )
        self.node_dur = np.concatenate(node_dur) if node_dur else np.zeros(0)

        # metastasis/death event rows evaluated at T_i
        self.evt_m = np.flatnonzero(self.delta == 1)
        self.evt_d = np.flatnonzero(self.delta == 2)
        evt_m_t = np.array([self.patients[i].event_time for i in self.evt_m])
        evt_d_t = np.array([self.patients[i].event_time for i in self.evt_d])
        evt_m_post = np.array(
            [self.patients[i].n_at(self.patients[i].event_time) for i in self.evt_m], dtype=bool
        ).reshape(-1)
        self.evt_m_post = evt_m_post
        self.evt_m_dur = np.array(
            [
                self.patients[i].event_time - self.patients[i].salvage_time
                if self.patients[i].salvage_time is not None
                else 0.0
                for i in self.evt_m
            ]
        )
        self.evt_d_post = np.array(
            [self.patients[i].n_at(self.patients[i].event_time) for i in self.evt_d], dtype=bool
        ).reshape(-1)

        self.Bhm = basis_matrix(self.node_t, spec.hazard_spline_m)
        self.Bhd = basis_matrix(self.node_t, spec.hazard_spline_d)
        self.Bhm_evt = basis_matrix(evt_m_t, spec.hazard_spline_m)
        self.Bhd_evt = basis_matrix(evt_d_t, spec.hazard_spline_d)

        self.W_m = np.zeros((n, len(spec.hazard_covariates_m)))
        self.W_d = np.zeros((n, len(spec.hazard_covariates_d)))
        self.ia = np.zeros(n)
        for i, pat in enumerate(self.patients):
            self.W_m[i] = cov_vector(pat, spec.hazard_covariates_m)
            self.W_d[i] = cov_vector(pat, spec.hazard_covariates_d)
            if spec.duration_interaction:
                self.ia[i] = pat.covariates[spec.duration_interaction]

        # feature designs at nodes and metastasis event rows
        def build_feature_stack(times, subj, post, which):
            mats_x, mats_z = [], []
            feats = spec.pre_features if which == "pre" else spec.post_features
            for feat in feats:
                x = np.zeros((times.shape[0], p))
                z = np.zeros((times.shape[0], q))
                sel = ~post if which == "pre" else post
                if which == "pre":
                    # average feature is undefined at t = 0; quadrature nodes
                    # are interior so this only guards event rows at T = 0
                    idx = np.flatnonzero(sel & (times > 0) if feat == "average" else sel)
                else:
                    idx = np.flatnonzero(sel)
                for i in np.unique(subj[idx]):
                    rows = idx[subj[idx] == i]
                    pat = self.patients[i]
                    cov = cov_vector(pat, spec.covariates)
                    xi, zi = feature_designs(
                        times[rows], feat, spec, cov, post=(which == "post"), s=pat.salvage_time
                    )
                    x[rows] = xi
                    z[rows] = zi
                mats_x.append(x)
                mats_z.append(z)
            return mats_x, mats_z

        self.FX, self.FZ = build_feature_stack(self.node_t, self.node_subj, self.node_post, "pre")
        self.GX, self.GZ = build_feature_stack(self.node_t, self.node_subj, self.node_post, "post")
        self.FX_evt, self.FZ_evt = build_feature_stack(evt_m_t, self.evt_m, evt_m_post, "pre")
        self.GX_evt, self.GZ_evt = build_feature_stack(evt_m_t, self.evt_m, evt_m_post, "post")

    # -- component evaluations ------------------------------------------------

    def rss_by_subject(self, params: Params, U: np.ndarray) -> np.ndarray:
        if self.y.size == 0:
            return np.zeros(self.n)
        mu = self.X @ params.beta_full + np.einsum("ij,ij->i", self.Z, U[self.obs_subj])
        return np.bincount(self.obs_subj, weights=(self.y - mu) ** 2, minlength=self.n)

    def long_components(self, params: Params, rss: np.ndarray) -> np.ndarray:
        return -0.5 * self.obs_count * np.log(2 * np.pi * params.sigma2) - rss / (2 * params.sigma2)

    def metastasis_features(self, params: Params, U: np.ndarray):
        """Feature values f_k / g_k at quadrature nodes and event rows."""
        beta = params.beta_full
        gather = U[self.node_subj] if self.node_subj.size else np.zeros((0, U.shape[1]))
        f = np.stack(
            [fx @ beta + np.einsum("ij,ij->i", fz, gather) for fx, fz in zip(self.FX, self.FZ)],
            axis=-1,
        ) if self.FX else np.zeros((self.node_t.shape[0], 0))
        g = np.stack(
            [gx @ beta + np.einsum("ij,ij->i", gz, gather) for gx, gz in zip(self.GX, self.GZ)],
            axis=-1,
        ) if self.GX else np.zeros((self.node_t.shape[0], 0))
        gather_e = U[self.evt_m] if self.evt_m.size else np.zeros((0, U.shape[1]))
        fe = np.stack(
            [
                fx @ beta + np.einsum("ij,ij->i", fz, gather_e)
                for fx, fz in zip(self.FX_evt, self.FZ_evt)
            ],
            axis=-1,
        ) if self.FX_evt else np.zeros((self.evt_m.size, 0))
        ge = np.stack(
            [
                gx @ beta + np.einsum("ij,ij->i", gz, gather_e)
                for gx, gz in zip(self.GX_evt, self.GZ_evt)
            ],
            axis=-1,
        ) if self.GX_evt else np.zeros((self.evt_m.size, 0))
        return f, g, fe, ge

    def surv_m_components(self, params: Params, feats) -> np.ndarray:
        """Per-subject metastasis contribution: delta-weighted log h minus integral."""
        f, g, fe, ge = feats
        pre = ~self.node_post
        lm = self.Bhm @ params.psi_hm
        if self.W_m.shape[1]:
            lm = lm + (self.W_m @ params.psi_m)[self.node_subj]
        gterm = (
            params.gamma_m
            + params.gamma_m1 * self.node_dur
            + params.gamma_m2 * self.node_dur * self.ia[self.node_subj]
        )
        lm = lm + np.where(self.node_post, gterm, 0.0)
        if f.shape[1]:
            lm = lm + pre * (f @ params.alpha_m)
        if g.shape[1]:
            lm = lm + self.node_post * (g @ params.xi_m)
        integ = np.bincount(self.node_subj, weights=self.node_w * np.exp(lm), minlength=self.n)
        out = -integ
        if self.evt_m.size:
            le = self.Bhm_evt @ params.psi_hm
            if self.W_m.shape[1]:
                le = le + self.W_m[self.evt_m] @ params.psi_m
            ge_term = (
                params.gamma_m
                + params.gamma_m1 * self.evt_m_dur
                + params.gamma_m2 * self.evt_m_dur * self.ia[self.evt_m]
            )
            le = le + np.where(self.evt_m_post, ge_term, 0.0)
            if fe.shape[1]:
                le = le + (~self.evt_m_post) * (fe @ params.alpha_m)
            if ge.shape[1]:
                le = le + self.evt_m_post * (ge @ params.xi_m)
            out[self.evt_m] += le
        return out

    def surv_d_components(self, params: Params) -> np.ndarray:
        ld = self.Bhd @ params.psi_hd
        if self.W_d.shape[1]:
            ld = ld + (self.W_d @ params.psi_d)[self.node_subj]
        ld = ld + params.gamma_d * self.node_post
        integ = np.bincount(self.node_subj, weights=self.node_w * np.exp(ld), minlength=self.n)
        out = -integ
        if self.evt_d.size:
            le = self.Bhd_evt @ params.psi_hd
            if self.W_d.shape[1]:
                le = le + self.W_d[self.evt_d] @ params.psi_d
            le = le + params.gamma_d * self.evt_d_post
            out[self.evt_d] += le
        return out

    def uprior_components(self, omega: np.ndarray, U: np.ndarray) -> np.ndarray:
        chol = np.linalg.cholesky(omega)
        sol = np.linalg.solve(chol, U.T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        q = omega.shape[0]
        return -0.5 * (q * np.log(2 * np.pi) + logdet + np.einsum("ji,ji->i", sol, sol))

    def loglik_by_subject(self, params: Params, U: np.ndarray) -> np.ndarray:
        out = self.long_components(params, self.rss_by_subject(params, U))
        if self.spec.survival_enabled:
            out = out + self.surv_m_components(params, self.metastasis_features(params, U))
            out = out + self.surv_d_components(params)
        return out


# ---------------------------------------------------------------------------
# densities


def _normal_block_logpdf(x, mean, sd) -> float:
    x = np.atleast_1d(x)
    return float(-0.5 * x.size * np.log(2 * np.pi * sd**2) - np.sum((x - mean) ** 2) / (2 * sd**2))


def _invgamma_logpdf(x, shape, rate) -> float:
    return float(shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x)


def _gamma_logpdf(x, shape, rate) -> float:
    return float(shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x)


def omega_logprior(omega: np.ndarray, priors: PriorSpec) -> float:
    """Inverse-Gamma variances + LKJ correlation density of an SPD matrix.

    Expressed in the matrix coordinates of omega (includes the Jacobian of the
    (variances, correlation) split); the LKJ normalizing constant is omitted,
    as it is constant in omega.
    """
    q = omega.shape[0]
    var = np.diag(omega)
    if np.any(var <= 0):
        raise ValueError("omega has nonpositive diagonal")
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        raise ValueError("omega is not positive definite")
    logdet_corr = logdet - np.sum(np.log(var))
    out = sum(_invgamma_logpdf(v, priors.omega_var_shape, priors.omega_var_rate) for v in var)
    out += (priors.lkj_shape - 1.0) * logdet_corr
    out -= 0.5 * (q - 1) * np.sum(np.log(var))
    return float(out)


def log_prior(params: Params, spec: ModelSpec, priors: PriorSpec) -> float:
    """Joint log prior of the parameter vector (penalized spline blocks included)."""
    params.validate(spec)
    out = 0.0
    out += _normal_block_logpdf(params.beta, *priors.normal_block("beta"))
    out += _normal_block_logpdf(params.beta_post, *priors.normal_block("beta_post"))
    out += _invgamma_logpdf(params.sigma2, priors.sigma2_shape, priors.sigma2_rate)
    out += omega_logprior(params.omega, priors)
    if spec.survival_enabled:
        for name, tau in (("psi_hm", params.tau_m), ("psi_hd", params.tau_d)):
            psi = getattr(params, name)
            pen = difference_penalty(psi.shape[0], priors.penalty_order)
            out += 0.5 * pen.rank * np.log(tau) - 0.5 * tau * float(psi @ pen.matrix @ psi)
        out += _gamma_logpdf(params.tau_m, priors.tau_shape, priors.tau_rate)
        out += _gamma_logpdf(params.tau_d, priors.tau_shape, priors.tau_rate)
        for name in ("psi_m", "psi_d"):
            v = getattr(params, name)
            if v.size:
                out += _normal_block_logpdf(v, *priors.normal_block(name))
        if params.alpha_m.size:
            out += _normal_block_logpdf(params.alpha_m, *priors.normal_block("alpha_m"))
        if params.xi_m.size:
            out += _normal_block_logpdf(params.xi_m, *priors.normal_block("xi_m"))
        out += _normal_block_logpdf(params.gamma_m, *priors.normal_block("gamma_m"))
        if spec.salvage_duration:
            out += _normal_block_logpdf(params.gamma_m1, *priors.normal_block("gamma_m1"))
            if spec.duration_interaction:
                out += _normal_block_logpdf(params.gamma_m2, *priors.normal_block("gamma_m2"))
        out += _normal_block_logpdf(params.gamma_d, *priors.normal_block("gamma_d"))
    return float(out)


def log_likelihood(params: Params, U, data, spec: ModelSpec = None, per_subject=False):
    """Observed-data log likelihood.

    ``data`` is a FitData or a sequence of PatientRecord (then ``spec`` is
    required). The salvage-assignment process contributes no factor: under
    sequential exchangeability that term separates and is dropped.
    """
    fit = data if isinstance(data, FitData) else FitData(data, spec)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    by_subject = fit.loglik_by_subject(params, U)
    return by_subject if per_subject else float(np.sum(by_subject))


def log_posterior(params: Params, U, data, priors: PriorSpec, spec: ModelSpec = None) -> float:
    """log prior + log likelihood + sum of random-effects log densities."""
    fit = data if isinstance(data, FitData) else FitData(data, spec)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    return (
        log_prior(params, fit.spec, priors)
        + log_likelihood(params, U, fit)
        + float(np.sum(fit.uprior_components(params.omega, U)))
    )


# ---------------------------------------------------------------------------
# posterior draws container


@dataclass
class PosteriorDraws:
    blocks: dict  # name -> (chains, keep, dim)
    u: np.ndarray  # (chains, keep, n, q)
    acceptance: dict  # name -> rate
    seed: int
    config: McmcConfig
    spec: ModelSpec
    priors: PriorSpec
    data_digest: str
    scales_warmup_end: dict
    scales_final: dict
    n_subjects: int

    @property
    def n_draws(self) -> int:
        first = next(iter(self.blocks.values()))
        return first.shape[0] * first.shape[1]

    def flat(self, name: str) -> np.ndarray:
        arr = self.blocks[name]
        return arr.reshape(-1, arr.shape[2])

    def flat_u(self) -> np.ndarray:
        return self.u.reshape(-1, self.u.shape[2], self.u.shape[3])

    def params_from(self, flat_index: int) -> Params:
        kw = {}
        for name, arr in self.blocks.items():
            flatarr = arr.reshape(-1, arr.shape[2])
            v = flatarr[flat_index]
            kw[name] = float(v[0]) if name in SCALAR_BLOCKS else v
        spec = self.spec
        return _params_from_blocks(kw, spec)

    def posterior_mean_params(self) -> Params:
        kw = {}
        for name, arr in self.blocks.items():
            m = arr.reshape(-1, arr.shape[2]).mean(axis=0)
            kw[name] = float(m[0]) if name in SCALAR_BLOCKS else m
        return _params_from_blocks(kw, self.spec)

    def save(self, path):
        from . import datio

        datio.save_draws(self, path)

    @staticmethod
    def load(path) -> "PosteriorDraws":
        from . import datio

        return datio.load_draws(path)

    @staticmethod
    def from_params(
        params: Params, spec: ModelSpec, priors: PriorSpec = None, n_subjects: int = 0
    ) -> "PosteriorDraws":
        """Degenerate one-draw container around a known parameter vector."""
        blocks = {}
        for name in (
            "beta",
            "beta_post",
            "sigma2",
            "psi_hm",
            "psi_m",
            "gamma_m",
            "gamma_m1",
            "gamma_m2",
            "alpha_m",
            "xi_m",
            "psi_hd",
            "psi_d",
            "gamma_d",
            "tau_m",
            "tau_d",
        ):
            vec = _store_value(params, name)
            if vec.size:
                blocks[name] = vec[None, None, :]
        blocks["omega_chol"] = _chol_to_vector(params.omega)[None, None, :]
        return PosteriorDraws(
            blocks=blocks,
            u=np.zeros((1, 1, n_subjects, spec.q)),
            acceptance={},
            seed=0,
            config=McmcConfig(chains=1, warmup=1, keep=1, seed=0),
            spec=spec,
            priors=priors if priors is not None else PriorSpec(),
            data_digest="",
            scales_warmup_end={},
            scales_final={},
            n_subjects=n_subjects,
        )


SCALAR_BLOCKS = {"sigma2", "gamma_m", "gamma_m1", "gamma_m2", "gamma_d", "tau_m", "tau_d"}


def _params_from_blocks(kw: dict, spec: ModelSpec) -> Params:
    q = spec.q
    tril = np.zeros((q, q))
    idx = np.tril_indices(q)
    chol_flat = np.asarray(kw.pop("omega_chol"))
    tril[idx] = chol_flat
    diag = np.arange(q)
    tril[diag, diag] = np.exp(tril[diag, diag])
    kw["omega"] = tril @ tril.T
    defaults = Params.zeros(spec)
    for name in (
        "psi_hm",
        "psi_m",
        "alpha_m",
        "xi_m",
        "psi_hd",
        "psi_d",
        "gamma_m",
        "gamma_m1",
        "gamma_m2",
        "gamma_d",
        "tau_m",
        "tau_d",
    ):
        kw.setdefault(name, getattr(defaults, name))
    return Params(**kw)


def data_digest(patients) -> str:
    h = hashlib.sha256()
    for pat in patients:
        h.update(
            json.dumps(
                {
                    "id": pat.id,
                    "cov": sorted(pat.covariates.items()),
                    "t": pat.times.tolist(),
                    "y": pat.y.tolist(),
                    "s": pat.salvage_time,
                    "T": pat.event_time,
                    "d": pat.event,
                },
                sort_keys=True,
            ).encode()
        )
    return h.hexdigest()


# ---------------------------------------------------------------------------
# sampler


class _Block:
    def __init__(self, name, size, scalar=False, log_scale=False, precond=None, target=None,
                 percoord=False, adapt_cov=False):
        self.name = name
        self.size = size
        self.scalar = scalar
        self.log_scale = log_scale
        self.percoord = percoord  # coordinate-at-a-time scalar moves
        self.precond = precond  # fixed lower-triangular proposal map
        if percoord:
            self.scale = np.full(size, 0.5)
        else:
            self.scale = 2.4 if scalar else 2.38 / np.sqrt(size)
        self.target = target if target is not None else (
            TARGET_ACC_SCALAR if scalar or percoord else TARGET_ACC_VECTOR
        )
        self.accepted = 0
        self.attempted = 0
        # adaptive-metropolis extra move: learn the joint covariance of the
        # block during warmup and propose with it (frozen afterwards)
        self.adapt_cov = adapt_cov
        if adapt_cov:
            self.am_mean = np.zeros(size)
            self.am_m2 = np.zeros((size, size))
            self.am_count = 0
            self.am_chol = None
            self.am_scale = 2.38 / np.sqrt(size)

    def am_update(self, value):
        self.am_count += 1
        delta = value - self.am_mean
        self.am_mean += delta / self.am_count
        self.am_m2 += np.outer(delta, value - self.am_mean)

    def am_cov_chol(self):
        if self.am_count < 10 * self.size:
            return None
        cov = self.am_m2 / (self.am_count - 1) + 1e-10 * np.eye(self.size)
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return None

    def scale_repr(self):
        if isinstance(self.scale, np.ndarray):
            return [float(s) for s in self.scale]
        return float(self.scale)


def _chol_to_vector(omega):
    chol = np.linalg.cholesky(omega)
    q = omega.shape[0]
    v = chol[np.tril_indices(q)].copy()
    # log the diagonal entries in place
    pos = np.cumsum(np.arange(1, q + 1)) - 1
    v[pos] = np.log(np.diag(chol))
    return v


def _vector_to_chol(v, q):
    tril = np.zeros((q, q))
    tril[np.tril_indices(q)] = v
    d = np.arange(q)
    tril[d, d] = np.exp(tril[d, d])
    return tril


def _chol_jacobian(v, q):
    # v -> L -> Omega: q log 2 + sum_j (q - j + 2) log L_jj, 1-based j
    pos = np.cumsum(np.arange(1, q + 1)) - 1
    logdiag = v[pos]
    j = np.arange(1, q + 1)
    return q * np.log(2.0) + float(np.sum((q - j + 2) * logdiag))


def initial_params(fit: FitData, priors: PriorSpec) -> Params:
    """Least-squares initialization for the longitudinal part, crude event
    rates for the baseline hazards, zeros elsewhere."""
    spec = fit.spec
    params = Params.zeros(spec)
    if fit.y.size:
        x = fit.X
        ridge = 1e-6 * np.eye(x.shape[1])
        coef = np.linalg.solve(x.T @ x + ridge, x.T @ fit.y)
        params.beta = coef[: spec.p_pre]
        params.beta_post = coef[spec.p_pre :]
        resid = fit.y - x @ coef
        dof = max(len(fit.y) - x.shape[1], 1)
        params.sigma2 = float(max(resid @ resid / dof, 1e-4))
    params.omega = 0.1 * np.eye(spec.q)
    if spec.survival_enabled:
        total_time = sum(p.event_time for p in fit.patients) or 1.0
        rate_m = max(np.sum(fit.delta == 1), 0.5) / total_time
        rate_d = max(np.sum(fit.delta == 2), 0.5) / total_time
        params.psi_hm[:] = np.log(rate_m)
        params.psi_hd[:] = np.log(rate_d)
        params.tau_m = priors.tau_shape / priors.tau_rate
        params.tau_d = priors.tau_shape / priors.tau_rate
    return params


class _SamplerState:
    """Mutable per-chain state with cached likelihood components."""

    def __init__(self, fit: FitData, params: Params, U: np.ndarray, priors: PriorSpec):
        self.fit = fit
        self.params = params
        self.U = U
        self.priors = priors
        self.refresh_all()

    def refresh_all(self):
        fit = self.fit
        self.rss = fit.rss_by_subject(self.params, self.U)
        self.comp_long = fit.long_components(self.params, self.rss)
        if fit.spec.survival_enabled:
            self.feats = fit.metastasis_features(self.params, self.U)
            self.comp_m = fit.surv_m_components(self.params, self.feats)
            self.comp_d = fit.surv_d_components(self.params)
        else:
            self.feats = None
            self.comp_m = np.zeros(fit.n)
            self.comp_d = np.zeros(fit.n)
        self.comp_uprior = fit.uprior_components(self.params.omega, self.U)

    def check_finite(self):
        for name in ("comp_long", "comp_m", "comp_d", "comp_uprior"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                bad = int(np.flatnonzero(~np.isfinite(v))[0])
                raise FloatingPointError(
                    f"non-finite posterior component {name} at initialization "
                    f"(subject index {bad})"
                )


def _block_prior(name, params, spec, priors):
    """Log prior contribution of a single block (for MH ratios)."""
    if name in ("beta", "beta_post", "psi_m", "psi_d", "alpha_m", "xi_m"):
        return _normal_block_logpdf(getattr(params, name), *priors.normal_block(name))
    if name in ("gamma_m", "gamma_m1", "gamma_m2", "gamma_d"):
        return _normal_block_logpdf(getattr(params, name), *priors.normal_block(name))
    if name == "sigma2":
        return _invgamma_logpdf(params.sigma2, priors.sigma2_shape, priors.sigma2_rate)
    if name == "omega_chol":
        return omega_logprior(params.omega, priors)
    if name in ("psi_hm", "psi_hd"):
        tau = params.tau_m if name == "psi_hm" else params.tau_d
        psi = getattr(params, name)
        pen = difference_penalty(psi.shape[0], priors.penalty_order)
        return 0.5 * pen.rank * np.log(tau) - 0.5 * tau * float(psi @ pen.matrix @ psi)
    if name in ("tau_m", "tau_d"):
        tau = getattr(params, name)
        psi = params.psi_hm if name == "tau_m" else params.psi_hd
        pen = difference_penalty(psi.shape[0], priors.penalty_order)
        penalized = 0.5 * pen.rank * np.log(tau) - 0.5 * tau * float(psi @ pen.matrix @ psi)
        return penalized + _gamma_logpdf(tau, priors.tau_shape, priors.tau_rate)
    raise KeyError(name)


_AFFECTS = {
    "beta": ("long", "m"),
    "beta_post": ("long", "m"),
    "sigma2": ("long",),
    "omega_chol": ("uprior",),
    "psi_hm": ("m",),
    "psi_m": ("m",),
    "gamma_m": ("m",),
    "gamma_m1": ("m",),
    "gamma_m2": ("m",),
    "alpha_m": ("m",),
    "xi_m": ("m",),
    "psi_hd": ("d",),
    "psi_d": ("d",),
    "gamma_d": ("d",),
    "tau_m": (),
    "tau_d": (),
}


def _build_blocks(fit: FitData, config: McmcConfig, init: Params):
    spec = fit.spec
    blocks = []

    def precond_from(mat, dim):
        if mat.shape[0] == 0:
            return None
        cov = np.linalg.inv(mat.T @ mat / max(1.0, init.sigma2) + np.eye(dim) * 1e-2)
        return np.linalg.cholesky(0.5 * (cov + cov.T))

    blocks.append(_Block("beta", spec.p_pre, precond=precond_from(fit.X[:, : spec.p_pre], spec.p_pre)))
    post_cols = fit.X[:, spec.p_pre :]
    has_post_rows = bool(post_cols.size) and np.any(post_cols != 0)
    blocks.append(
        _Block(
            "beta_post",
            spec.p_post,
            precond=precond_from(post_cols, spec.p_post) if has_post_rows else None,
        )
    )
    blocks.append(_Block("sigma2", 1, scalar=True, log_scale=True))
    qc = spec.q * (spec.q + 1) // 2
    # the Cholesky coordinates live on very different scales, so they move one
    # at a time with individually adapted step sizes, plus a joint move whose
    # covariance is learned during warmup
    blocks.append(_Block("omega_chol", qc, percoord=True, adapt_cov=True))

    def hazard_precond(bmat, weights, rate, tau, dim):
        if bmat.shape[0] == 0:
            return None
        pen = difference_penalty(dim, 2).matrix
        h = bmat.T @ (bmat * (weights * rate)[:, None]) + tau * pen + 1e-2 * np.eye(dim)
        cov = np.linalg.inv(h)
        return np.linalg.cholesky(0.5 * (cov + cov.T))

    if spec.survival_enabled:
        rate_m = float(np.exp(np.mean(init.psi_hm)))
        rate_d = float(np.exp(np.mean(init.psi_hd)))
        blocks.append(
            _Block(
                "psi_hm",
                spec.hazard_spline_m.dim,
                precond=hazard_precond(
                    fit.Bhm, fit.node_w, rate_m, init.tau_m, spec.hazard_spline_m.dim
                ),
            )
        )
        if spec.hazard_covariates_m:
            blocks.append(_Block("psi_m", len(spec.hazard_covariates_m)))
        blocks.append(_Block("gamma_m", 1, scalar=True))
        if spec.salvage_duration:
            blocks.append(_Block("gamma_m1", 1, scalar=True))
            if spec.duration_interaction:
                blocks.append(_Block("gamma_m2", 1, scalar=True))
        if spec.pre_features:
            blocks.append(_Block("alpha_m", len(spec.pre_features)))
        if spec.post_features:
            blocks.append(_Block("xi_m", len(spec.post_features)))
        blocks.append(
            _Block(
                "psi_hd",
                spec.hazard_spline_d.dim,
                precond=hazard_precond(
                    fit.Bhd, fit.node_w, rate_d, init.tau_d, spec.hazard_spline_d.dim
                ),
            )
        )
        if spec.hazard_covariates_d:
            blocks.append(_Block("psi_d", len(spec.hazard_covariates_d)))
        blocks.append(_Block("gamma_d", 1, scalar=True))
        blocks.append(_Block("tau_m", 1, scalar=True, log_scale=True))
        blocks.append(_Block("tau_d", 1, scalar=True, log_scale=True))
    fixed_names = {"omega_chol" if k == "omega" else k for k in config.fixed}
    return [b for b in blocks if b.name not in fixed_names]


def _get_block_value(params: Params, name: str):
    """Block value in sampler (unconstrained) coordinates."""
    if name == "omega_chol":
        return _chol_to_vector(params.omega)
    v = getattr(params, name)
    if name in ("sigma2", "tau_m", "tau_d"):
        return np.array([np.log(v)])
    if np.isscalar(v) or np.ndim(v) == 0:
        return np.array([float(v)])
    return np.asarray(v, dtype=float).copy()


def _store_value(params: Params, name: str):
    """Block value as stored in draws: natural scale, omega as Cholesky vector."""
    if name == "omega_chol":
        return _chol_to_vector(params.omega)
    v = getattr(params, name)
    if np.isscalar(v) or np.ndim(v) == 0:
        return np.array([float(v)])
    return np.asarray(v, dtype=float).copy()


def _set_block_value(params: Params, name: str, value: np.ndarray):
    if name == "omega_chol":
        q = params.omega.shape[0]
        chol = _vector_to_chol(value, q)
        params.omega = chol @ chol.T
        return
    if name == "sigma2":
        params.sigma2 = float(np.exp(value[0]))
        return
    if name in ("tau_m", "tau_d"):
        setattr(params, name, float(np.exp(value[0])))
        return
    if name in SCALAR_BLOCKS:
        setattr(params, name, float(value[0]))
        return
    setattr(params, name, np.asarray(value, dtype=float).copy())


def _transform_jacobian(name: str, value: np.ndarray, q: int) -> float:
    if name in ("sigma2", "tau_m", "tau_d"):
        return float(value[0])  # d sigma2 / d log sigma2 = sigma2
    if name == "omega_chol":
        return _chol_jacobian(value, q)
    return 0.0


def run_mcmc(patients, spec: ModelSpec, priors: PriorSpec, config: McmcConfig) -> PosteriorDraws:
    """Adaptive MH-within-Gibbs sampling of the joint posterior.

    Same seed and config give bit-identical draws; chains use independent
    child streams of the seed.
    """
    fit = patients if isinstance(patients, FitData) else FitData(patients, spec)
    spec = fit.spec
    n, q = fit.n, spec.q
    base = initial_params(fit, priors)
    for name, value in config.fixed.items():
        if name == "omega":
            base.omega = np.asarray(value, dtype=float)
        elif name in SCALAR_BLOCKS:
            setattr(base, name, float(value))
        else:
            setattr(base, name, np.asarray(value, dtype=float))
    blocks_proto = _build_blocks(fit, config, base)

    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    kept_per_chain = config.keep
    total_iters = config.warmup + config.keep * config.thin

    out_blocks = {
        b.name: np.empty((config.chains, kept_per_chain, b.size)) for b in blocks_proto
    }
    # fixed blocks are recorded too so downstream code can always rebuild Params
    fixed_names = [k if k != "omega" else "omega_chol" for k in config.fixed]
    out_u = np.empty((config.chains, kept_per_chain, n, q))
    acceptance = {}
    scales_warmup_end = {}
    scales_final = {}

    for c in range(config.chains):
        rng = np.random.default_rng(seeds[c])
        params = base.copy()
        # overdispersed starts: jitter the unpinned blocks
        blocks = [
            _Block(b.name, b.size, b.scalar, b.log_scale, b.precond, b.target)
            for b in blocks_proto
        ]
        for b in blocks:
            v = _get_block_value(params, b.name)
            jitter = 0.1 if b.name != "omega_chol" else 0.02
            _set_block_value(params, b.name, v + rng.normal(scale=jitter, size=b.size))
        U = np.zeros((n, q))
        state = _SamplerState(fit, params, U, priors)
        state.check_finite()
        u_scales = np.full(n, 2.38 / np.sqrt(q))
        u_acc = 0
        u_att = 0
        omega_chol = np.linalg.cholesky(params.omega)
        recenter_pairs = []
        recenter_groups = []
        if "beta" not in config.fixed:
            recenter_pairs += [("beta", i, i) for i in range(spec.q_pre)]
            pre_precond = next(b.precond for b in blocks_proto if b.name == "beta")
            recenter_groups.append((
                "beta",
                np.arange(spec.q_pre),
                np.arange(spec.q_pre),
                pre_precond[: spec.q_pre, : spec.q_pre] if pre_precond is not None else None,
            ))
        if "beta_post" not in config.fixed:
            recenter_pairs += [("beta_post", i, spec.q_pre + i) for i in range(spec.q_post)]
            post_precond = next(b.precond for b in blocks_proto if b.name == "beta_post")
            recenter_groups.append((
                "beta_post",
                np.arange(spec.q_post),
                spec.q_pre + np.arange(spec.q_post),
                post_precond[: spec.q_post, : spec.q_post] if post_precond is not None else None,
            ))
        recenter_scales = np.full(len(recenter_pairs), 0.5)
        group_scales = np.full(len(recenter_groups), 1.0)
        asis_scales = np.full(q * (q + 1) // 2, 0.2)

        kept = 0
        for it in range(total_iters):
            warm = it < config.warmup
            adapt_step = min(0.25, 4.0 / np.sqrt(it + 1.0))
            for b in blocks:
                if b.percoord:
                    for k in range(b.size):
                        cur = _get_block_value(params, b.name)
                        prop = cur.copy()
                        prop[k] += rng.normal() * b.scale[k]
                        delta, updates, saved = _propose(state, b, params, spec, priors, cur, prop, q)
                        if np.log(rng.uniform()) < delta:
                            _apply_updates(state, updates)
                            b.accepted += 1
                        else:
                            _restore(params, b.name, saved)
                        b.attempted += 1
                        if warm:
                            acc_prob = np.exp(min(delta, 0.0)) if delta > -np.inf else 0.0
                            b.scale[k] *= np.exp(adapt_step * (acc_prob - b.target))
                    if b.adapt_cov:
                        cur = _get_block_value(params, b.name)
                        if warm:
                            b.am_update(cur)
                            b.am_chol = b.am_cov_chol()
                        if b.am_chol is not None:
                            prop = cur + b.am_scale * (b.am_chol @ rng.standard_normal(b.size))
                            delta, updates, saved = _propose(
                                state, b, params, spec, priors, cur, prop, q
                            )
                            if np.log(rng.uniform()) < delta:
                                _apply_updates(state, updates)
                            else:
                                _restore(params, b.name, saved)
                            if warm:
                                acc_prob = np.exp(min(delta, 0.0)) if delta > -np.inf else 0.0
                                b.am_scale *= np.exp(adapt_step * (acc_prob - TARGET_ACC_VECTOR))
                    if b.name == "omega_chol":
                        omega_chol = np.linalg.cholesky(params.omega)
                    continue
                cur = _get_block_value(params, b.name)
                step = rng.normal(size=b.size) * b.scale
                if b.precond is not None:
                    step = b.precond @ step
                prop = cur + step
                delta, updates, saved = _propose(state, b, params, spec, priors, cur, prop, q)
                if np.log(rng.uniform()) < delta:
                    _apply_updates(state, updates)
                    b.accepted += 1
                else:
                    _restore(params, b.name, saved)
                b.attempted += 1
                if warm:
                    # Robbins-Monro on the log proposal scale toward the target rate
                    acc_prob = np.exp(min(delta, 0.0)) if delta > -np.inf else 0.0
                    b.scale *= np.exp(adapt_step * (acc_prob - b.target))
            # u update (vectorized across subjects)
            if n:
                z = rng.standard_normal((n, q))
                prop_u = state.U + u_scales[:, None] * (z @ omega_chol.T)
                new_rss = fit.rss_by_subject(params, prop_u)
                new_long = fit.long_components(params, new_rss)
                if spec.survival_enabled:
                    new_feats = fit.metastasis_features(params, prop_u)
                    new_m = fit.surv_m_components(params, new_feats)
                else:
                    new_feats = None
                    new_m = state.comp_m
                new_uprior = fit.uprior_components(params.omega, prop_u)
                delta_i = (
                    new_long
                    - state.comp_long
                    + new_m
                    - state.comp_m
                    + new_uprior
                    - state.comp_uprior
                )
                accept = np.log(rng.uniform(size=n)) < delta_i
                if accept.any():
                    state.U[accept] = prop_u[accept]
                    state.rss[accept] = new_rss[accept]
                    state.comp_long[accept] = new_long[accept]
                    state.comp_m[accept] = new_m[accept]
                    state.comp_uprior[accept] = new_uprior[accept]
                    if spec.survival_enabled:
                        _merge_feats(state, new_feats, accept, fit)
                u_acc += int(accept.sum())
                u_att += n
                if warm:
                    acc_prob = np.exp(np.minimum(delta_i, 0.0))
                    acc_prob = np.where(np.isfinite(acc_prob), acc_prob, 0.0)
                    u_scales *= np.exp(adapt_step * (acc_prob - TARGET_ACC_VECTOR))

            # recentering: shift fixed coefficients against their aligned random
            # columns. The design columns coincide, so the likelihood is exactly
            # invariant and only the beta prior and the u density move; this
            # breaks the slow fixed/random-effect coupling. Scalar per-pair
            # moves are followed by joint per-block moves along the
            # least-squares geometry.
            if n and config.recenter and recenter_pairs:
                dirty = False
                for k, (attr, bidx, ucol) in enumerate(recenter_pairs):
                    d = rng.normal() * recenter_scales[k]
                    vec = getattr(params, attr)
                    mean, sd = priors.normal_block(attr)
                    cur_coef = vec[bidx]
                    dprior = (
                        -((cur_coef + d - mean) ** 2) + (cur_coef - mean) ** 2
                    ) / (2 * sd**2)
                    u_shift = state.U.copy()
                    u_shift[:, ucol] -= d
                    new_uprior = fit.uprior_components(params.omega, u_shift)
                    delta = dprior + float(np.sum(new_uprior)) - float(np.sum(state.comp_uprior))
                    if np.log(rng.uniform()) < delta:
                        vec[bidx] = cur_coef + d
                        state.U = u_shift
                        state.comp_uprior = new_uprior
                        dirty = True
                    if warm:
                        acc_prob = np.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
                        recenter_scales[k] *= np.exp(adapt_step * (acc_prob - TARGET_ACC_SCALAR))
                for g, (attr, bidxs, ucols, precond) in enumerate(recenter_groups):
                    step = rng.normal(size=len(bidxs)) * group_scales[g]
                    if precond is not None:
                        step = precond @ step
                    vec = getattr(params, attr)
                    mean, sd = priors.normal_block(attr)
                    cur = vec[bidxs]
                    dprior = float(
                        (-np.sum((cur + step - mean) ** 2) + np.sum((cur - mean) ** 2))
                        / (2 * sd**2)
                    )
                    u_shift = state.U.copy()
                    u_shift[:, ucols] -= step
                    new_uprior = fit.uprior_components(params.omega, u_shift)
                    delta = dprior + float(np.sum(new_uprior)) - float(np.sum(state.comp_uprior))
                    if np.log(rng.uniform()) < delta:
                        vec[bidxs] = cur + step
                        state.U = u_shift
                        state.comp_uprior = new_uprior
                        dirty = True
                    if warm:
                        acc_prob = np.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
                        group_scales[g] *= np.exp(adapt_step * (acc_prob - TARGET_ACC_VECTOR))
                if dirty:
                    # the move is likelihood-invariant in exact arithmetic; refresh
                    # the caches so float drift cannot accumulate
                    state.rss = fit.rss_by_subject(params, state.U)
                    state.comp_long = fit.long_components(params, state.rss)
                    if spec.survival_enabled:
                        state.feats = fit.metastasis_features(params, state.U)
                        state.comp_m = fit.surv_m_components(params, state.feats)

            # interweaving moves on the covariance Cholesky factor: hold the
            # whitened effects v = L^-1 u fixed while one factor coordinate
            # moves, i.e. map U -> U (L' L^-1)^T. The u-density change cancels
            # against the transformation Jacobian, leaving the omega prior, the
            # factor-coordinate Jacobian (diagonal moves only) and the
            # likelihood under the transformed effects.
            if n and config.interweave and "omega" not in config.fixed:
                tril_rows, tril_cols = np.tril_indices(q)
                diag_ks = [k for k in range(asis_scales.shape[0]) if tril_rows[k] == tril_cols[k]]
                offdiag_ks = [k for k in range(asis_scales.shape[0]) if tril_rows[k] != tril_cols[k]]
                # diagonal factor coordinates move every iteration; off-diagonal
                # ones rotate in pairs to bound the per-iteration cost
                chosen = list(diag_ks)
                if offdiag_ks:
                    m_off = len(offdiag_ks)
                    chosen += [offdiag_ks[(2 * it) % m_off], offdiag_ks[(2 * it + 1) % m_off]]
                for k in chosen:
                    r, s_ = int(tril_rows[k]), int(tril_cols[k])
                    d = rng.normal() * asis_scales[k]
                    chol_new = omega_chol.copy()
                    if r == s_:
                        chol_new[r, r] *= np.exp(d)
                        jac = (q - r + 1) * d  # (q - j + 2) d with 1-based j
                    else:
                        chol_new[r, s_] += d
                        jac = 0.0
                    om = chol_new @ chol_new.T
                    amat = chol_new @ np.linalg.inv(omega_chol)
                    u2 = state.U @ amat.T
                    try:
                        delta = omega_logprior(om, priors) - omega_logprior(params.omega, priors)
                        delta += jac
                        new_rss = fit.rss_by_subject(params, u2)
                        new_long = fit.long_components(params, new_rss)
                        delta += float(np.sum(new_long) - np.sum(state.comp_long))
                        if spec.survival_enabled:
                            new_feats = fit.metastasis_features(params, u2)
                            new_m = fit.surv_m_components(params, new_feats)
                            delta += float(np.sum(new_m) - np.sum(state.comp_m))
                    except (FloatingPointError, np.linalg.LinAlgError, ValueError):
                        delta = -np.inf
                    if not np.isfinite(delta):
                        delta = -np.inf
                    if np.log(rng.uniform()) < delta:
                        params.omega = om
                        state.U = u2
                        state.rss = new_rss
                        state.comp_long = new_long
                        if spec.survival_enabled:
                            state.feats = new_feats
                            state.comp_m = new_m
                        state.comp_uprior = fit.uprior_components(om, state.U)
                        omega_chol = chol_new
                    if warm:
                        acc_prob = np.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
                        asis_scales[k] *= np.exp(adapt_step * (acc_prob - TARGET_ACC_SCALAR))

            if warm and it == config.warmup - 1:
                scales_warmup_end[f"chain{c}"] = {b.name: b.scale_repr() for b in blocks}
                scales_warmup_end[f"chain{c}"]["u_mean"] = float(u_scales.mean()) if n else 0.0
                scales_warmup_end[f"chain{c}"]["recenter"] = [float(s) for s in recenter_scales]
                scales_warmup_end[f"chain{c}"]["omega_scalemove"] = [float(s) for s in asis_scales]

            if not warm and (it - config.warmup) % config.thin == 0 and kept < kept_per_chain:
                for b in blocks:
                    out_blocks[b.name][c, kept] = _store_value(params, b.name)
                out_u[c, kept] = state.U
                kept += 1

        scales_final[f"chain{c}"] = {b.name: b.scale_repr() for b in blocks}
        scales_final[f"chain{c}"]["u_mean"] = float(u_scales.mean()) if n else 0.0
        scales_final[f"chain{c}"]["recenter"] = [float(s) for s in recenter_scales]
        scales_final[f"chain{c}"]["omega_scalemove"] = [float(s) for s in asis_scales]
        for b in blocks:
            acceptance.setdefault(b.name, []).append(b.accepted / max(b.attempted, 1))
        acceptance.setdefault("u", []).append(u_acc / max(u_att, 1))

    acceptance = {k: float(np.mean(v)) for k, v in acceptance.items()}

    # store pinned blocks as constant columns
    for name, value in config.fixed.items():
        if name == "omega":
            vec = _chol_to_vector(np.asarray(value, dtype=float))
            out_blocks["omega_chol"] = np.tile(vec, (config.chains, kept_per_chain, 1))
        else:
            vec = _store_value(base, name)
            out_blocks[name] = np.tile(vec, (config.chains, kept_per_chain, 1))

    return PosteriorDraws(
        blocks=out_blocks,
        u=out_u,
        acceptance=acceptance,
        seed=config.seed,
        config=config,
        spec=spec,
        priors=priors,
        data_digest=data_digest(fit.patients),
        scales_warmup_end=scales_warmup_end,
        scales_final=scales_final,
        n_subjects=n,
    )


def _propose(state, b, params, spec, priors, cur, prop, q):
    """Apply a proposal to params and score it; the caller accepts or restores."""
    old_prior = _block_prior(b.name, params, spec, priors)
    old_jac = _transform_jacobian(b.name, cur, q)
    old_comps = {comp: _component_sum(state, comp) for comp in _AFFECTS[b.name]}
    saved = _snapshot(params, b.name)
    _set_block_value(params, b.name, prop)
    try:
        new_prior = _block_prior(b.name, params, spec, priors)
        delta = new_prior - old_prior + _transform_jacobian(b.name, prop, q) - old_jac
        updates = _recompute(state, b.name)
        for comp in _AFFECTS[b.name]:
            delta += _component_sum_from(updates, state, comp) - old_comps[comp]
    except (FloatingPointError, np.linalg.LinAlgError, ValueError):
        delta, updates = -np.inf, None
    if not np.isfinite(delta):
        delta = -np.inf
    return delta, updates, saved


def _component_sum(state, comp):
    return float(np.sum(getattr(state, _COMP_ATTR[comp])))


_COMP_ATTR = {"long": "comp_long", "m": "comp_m", "d": "comp_d", "uprior": "comp_uprior"}


def _snapshot(params, name):
    if name == "omega_chol":
        return params.omega.copy()
    v = getattr(params, name)
    return v.copy() if isinstance(v, np.ndarray) else v


def _restore(params, name, saved):
    if name == "omega_chol":
        params.omega = saved
    else:
        setattr(params, name, saved)


def _recompute(state, block_name):
    """New values of the components a block touches, for its proposal."""
    fit = state.fit
    params = state.params
    updates = {}
    affected = _AFFECTS[block_name]
    if "long" in affected:
        if block_name == "sigma2":
            updates["rss"] = state.rss
        else:
            updates["rss"] = fit.rss_by_subject(params, state.U)
        updates["comp_long"] = fit.long_components(params, updates["rss"])
    if "m" in affected and fit.spec.survival_enabled:
        if block_name in ("beta", "beta_post"):
            updates["feats"] = fit.metastasis_features(params, state.U)
        else:
            updates["feats"] = state.feats
        updates["comp_m"] = fit.surv_m_components(params, updates["feats"])
    if "d" in affected and fit.spec.survival_enabled:
        updates["comp_d"] = fit.surv_d_components(params)
    if "uprior" in affected:
        updates["comp_uprior"] = fit.uprior_components(params.omega, state.U)
    return updates


def _component_sum_from(updates, state, comp):
    attr = _COMP_ATTR[comp]
    if updates is not None and attr in updates:
        return float(np.sum(updates[attr]))
    return float(np.sum(getattr(state, attr)))


def _apply_updates(state, updates):
    if updates is None:
        return
    for key, value in updates.items():
        setattr(state, key, value)


def _merge_feats(state, new_feats, accept, fit):
    f, g, fe, ge = state.feats
    nf, ng, nfe, nge = new_feats
    node_acc = accept[fit.node_subj]
    f = f.copy()
    g = g.copy()
    f[node_acc] = nf[node_acc]
    g[node_acc] = ng[node_acc]
    if fit.evt_m.size:
        evt_acc = accept[fit.evt_m]
        fe = fe.copy()
        ge = ge.copy()
        fe[evt_acc] = nfe[evt_acc]
        ge[evt_acc] = nge[evt_acc]
    state.feats = (f, g, fe, ge)


# ---------------------------------------------------------------------------
# diagnostics


def rhat(draws, parameter=None) -> float:
    """Split-chain potential scale reduction factor.

    ``draws`` is a PosteriorDraws plus a parameter selector "block[i]" (or a
    (block, index) tuple), or directly an (m, n) array of chains.
    """
    if isinstance(draws, PosteriorDraws):
        name, idx = _parse_parameter(parameter)
        chains = draws.blocks[name][:, :, idx]
    else:
        chains = np.asarray(draws, dtype=float)
    m, length = chains.shape
    if m < 2:
        raise ValueError("rhat needs at least 2 chains")
    if length < 10:
        raise ValueError("rhat needs at least 10 kept iterations")
    half = length // 2
    split = np.vstack([chains[:, :half], chains[:, half : 2 * half]])
    w = split.var(axis=1, ddof=1).mean()
    if w == 0:
        raise ValueError("degenerate (constant) chains")
    b_over_n = split.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b_over_n
    return float(np.sqrt(var_plus / w))


def _parse_parameter(parameter):
    if isinstance(parameter, tuple):
        return parameter
    if isinstance(parameter, str) and "[" in parameter:
        name, rest = parameter.split("[", 1)
        return name, int(rest.rstrip("]"))
    return parameter, 0


def rhat_summary(draws: PosteriorDraws) -> dict:
    """R-hat for every parameter coordinate; skips pinned constant blocks."""
    out = {}
    for name, arr in draws.blocks.items():
        for j in range(arr.shape[2]):
            try:
                out[f"{name}[{j}]"] = rhat(arr[:, :, j])
            except ValueError:
                continue
    return out


@dataclass(frozen=True)
class InformationCriteria:
    dic: float
    waic: float
    lpml: float
    p_d: float
    p_waic: float
    cpo_excluded: int


def information_criteria(draws: PosteriorDraws, patients, spec: ModelSpec = None) -> InformationCriteria:
    """DIC, WAIC and LPML from per-subject conditional likelihood contributions."""
    fit = patients if isinstance(patients, FitData) else FitData(patients, spec or draws.spec)
    n_draws = draws.n_draws
    if n_draws == 0:
        raise ValueError("empty posterior draws")
    flat_u = draws.flat_u()
    ll = np.empty((n_draws, fit.n))
    for l in range(n_draws):
        params = draws.params_from(l)
        ll[l] = fit.loglik_by_subject(params, flat_u[l])

    mean_params = draws.posterior_mean_params()
    mean_u = flat_u.mean(axis=0)
    ll_at_mean = float(np.sum(fit.loglik_by_subject(mean_params, mean_u)))
    dev_mean = -2.0 * float(np.mean(np.sum(ll, axis=1)))
    dev_at_mean = -2.0 * ll_at_mean
    p_d = dev_mean - dev_at_mean
    dic = dev_at_mean + 2.0 * p_d

    # WAIC: pointwise predictive density with the variance penalty
    max_ll = ll.max(axis=0)
    lppd = float(np.sum(np.log(np.mean(np.exp(ll - max_ll), axis=0)) + max_ll))
    p_waic = float(np.sum(ll.var(axis=0, ddof=1))) if n_draws > 1 else 0.0
    waic = -2.0 * (lppd - p_waic)

    # LPML via harmonic-mean CPO per subject, in log space
    neg = -ll
    mx = neg.max(axis=0)
    log_mean_inv = np.log(np.mean(np.exp(neg - mx), axis=0)) + mx
    log_cpo = -log_mean_inv
    good = np.isfinite(log_cpo)
    lpml = float(np.sum(log_cpo[good]))
    return InformationCriteria(
        dic=dic,
        waic=waic,
        lpml=lpml,
        p_d=p_d,
        p_waic=p_waic,
        cpo_excluded=int(np.sum(~good)),
    )
