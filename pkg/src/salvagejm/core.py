"""Shared domain types: patient records, model structure, parameter vectors.

The longitudinal mean has a change point at the salvage time S: before S it is
an intercept + time trend (linear or B-spline) + baseline covariates, after S
an additive deviation with its own intercept drop and slope in t - S. Both
parts carry subject-level random effects u = (b, b_tilde) ~ N(0, Omega).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import SplineConfig

__all__ = [
    "PatientRecord",
    "ModelSpec",
    "Params",
    "cov_vector",
    "truncate_history",
    "FORM_FEATURES",
    "PRE_FEATURES",
    "POST_FEATURES",
]

PRE_FEATURES = ("value", "slope", "average", "lagdiff")
POST_FEATURES = ("value", "drop_level", "slope_level")

# f/g feature sets for the named hazard functional forms
FORM_FEATURES = {
    "M1": (("value",), ("value",)),
    "M2": (("value", "slope"), ("value",)),
    "M3": (("value", "slope"), ("drop_level", "slope_level")),
    "M4": (("value", "average"), ("drop_level", "slope_level")),
}


@dataclass(frozen=True)
class PatientRecord:
    """One subject: baseline covariates, transformed PSA series, outcome.

    ``y`` holds log(PSA + 1) values at ``times``. Extra covariate entries not
    referenced by the ModelSpec are allowed and ignored by the model.
    """

    id: str
    covariates: dict[str, float]
    times: np.ndarray
    y: np.ndarray
    salvage_time: float | None
    event_time: float
    event: int

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        if times.shape != y.shape:
            raise ValueError(f"patient {self.id}: times/values length mismatch")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError(f"patient {self.id}: measurement times not strictly increasing")
        if times.size and (times[0] < 0 or times[-1] > self.event_time):
            raise ValueError(f"patient {self.id}: measurement times outside [0, T]")
        if self.event not in (0, 1, 2):
            raise ValueError(f"patient {self.id}: event code must be 0, 1 or 2")
        if self.event_time < 0:
            raise ValueError(f"patient {self.id}: negative event time")
        s = self.salvage_time
        if s is not None and not 0 < s <= self.event_time:
            raise ValueError(f"patient {self.id}: salvage time must satisfy 0 < S <= T")

    def n_at(self, t) -> np.ndarray:
        """Salvage status N(t) = I(t >= S), elementwise over t."""
        t = np.asarray(t, dtype=float)
        if self.salvage_time is None:
            return np.zeros(t.shape, dtype=bool)
        return t >= self.salvage_time

    @property
    def n_obs(self) -> int:
        return int(self.times.size)


def cov_vector(patient: PatientRecord, names) -> np.ndarray:
    try:
        return np.array([patient.covariates[n] for n in names], dtype=float)
    except KeyError as exc:
        raise KeyError(f"patient {patient.id} is missing covariate {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Submodel structure: designs, covariate lists, hazard functional form."""

    time_design: str = "bspline"  # "bspline" | "linear"
    long_spline: SplineConfig | None = None
    covariates: tuple[str, ...] = ()
    post_design: str = "drop_slope"  # "drop_slope" | "drop"
    form: str = "M1"  # M1..M4 | "custom"
    pre_features: tuple[str, ...] = ()
    post_features: tuple[str, ...] = ()
    hazard_covariates_m: tuple[str, ...] = ()
    hazard_covariates_d: tuple[str, ...] = ()
    hazard_spline_m: SplineConfig | None = None
    hazard_spline_d: SplineConfig | None = None
    salvage_duration: bool = False  # gamma_m1 * (t - S) term
    duration_interaction: str | None = None  # covariate for gamma_m2 * (t-S) * cov
    survival_enabled: bool = True

    def __post_init__(self):
        if self.time_design not in ("bspline", "linear"):
            raise ValueError("time_design must be 'bspline' or 'linear'")
        if self.time_design == "bspline" and self.long_spline is None:
            raise ValueError("bspline time design requires long_spline")
        if self.post_design not in ("drop_slope", "drop"):
            raise ValueError("post_design must be 'drop_slope' or 'drop'")
        if self.form in FORM_FEATURES:
            pre, post = FORM_FEATURES[self.form]
            object.__setattr__(self, "pre_features", pre)
            object.__setattr__(self, "post_features", post)
        elif self.form == "custom":
            for f in self.pre_features:
                if f not in PRE_FEATURES:
                    raise ValueError(f"unknown pre-salvage feature {f!r}")
            for g in self.post_features:
                if g not in POST_FEATURES:
                    raise ValueError(f"unknown post-salvage feature {g!r}")
        else:
            raise ValueError(f"unknown functional form {self.form!r}")
        if self.survival_enabled:
            if self.hazard_spline_m is None or self.hazard_spline_d is None:
                raise ValueError("survival model requires baseline hazard spline configs")
        needs_levels = {"drop_level", "slope_level"} & set(self.post_features)
        if needs_levels and self.post_design != "drop_slope":
            raise ValueError("drop/slope level features require the drop_slope post design")
        if self.duration_interaction is not None and not self.salvage_duration:
            raise ValueError("duration interaction requires salvage_duration")

    # design dimensions
    @property
    def n_time_terms(self) -> int:
        if self.time_design == "linear":
            return 1
        return self.long_spline.dim - 1  # first basis absorbed by the intercept

    @property
    def p_pre(self) -> int:
        return 1 + self.n_time_terms + len(self.covariates)

    @property
    def p_post(self) -> int:
        base = 2 if self.post_design == "drop_slope" else 1
        return base + len(self.covariates)

    @property
    def q_pre(self) -> int:
        return 1 + self.n_time_terms

    @property
    def q_post(self) -> int:
        return 2 if self.post_design == "drop_slope" else 1

    @property
    def q(self) -> int:
        return self.q_pre + self.q_post

    @property
    def domain(self) -> tuple[float, float]:
        if self.time_design == "linear":
            return (0.0, np.inf)
        return self.long_spline.boundary_knots


@dataclass
class Params:
    """Full parameter vector for both submodels plus variance components."""

    beta: np.ndarray  # pre fixed: [intercept, time terms.., covariate effects]
    beta_post: np.ndarray  # post fixed: [drop(, slope), covariate effects]
    sigma2: float
    omega: np.ndarray  # (q, q) random-effects covariance, SPD
    psi_hm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma_m: float = 0.0
    gamma_m1: float = 0.0
    gamma_m2: float = 0.0
    alpha_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    xi_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi_hd: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi_d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma_d: float = 0.0
    tau_m: float = 1.0
    tau_d: float = 1.0

    def __post_init__(self):
        for name in ("beta", "beta_post", "psi_hm", "psi_m", "alpha_m", "xi_m", "psi_hd", "psi_d"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.omega = np.asarray(self.omega, dtype=float)

    def validate(self, spec: ModelSpec):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")
        if self.tau_m <= 0 or self.tau_d <= 0:
            raise ValueError("smoothing parameters must be > 0")
        q = spec.q
        if self.omega.shape != (q, q):
            raise ValueError(f"omega must be {q}x{q}")
        try:
            np.linalg.cholesky(self.omega)
        except np.linalg.LinAlgError:
            raise ValueError("omega is not positive definite") from None
        expect = {
            "beta": spec.p_pre,
            "beta_post": spec.p_post,
        }
        if spec.survival_enabled:
            expect.update(
                psi_hm=spec.hazard_spline_m.dim,
                psi_m=len(spec.hazard_covariates_m),
                alpha_m=len(spec.pre_features),
                xi_m=len(spec.post_features),
                psi_hd=spec.hazard_spline_d.dim,
                psi_d=len(spec.hazard_covariates_d),
            )
        for name, dim in expect.items():
            got = getattr(self, name).shape[0]
            if got != dim:
                raise ValueError(f"{name} has dimension {got}, spec requires {dim}")
        return self

    @property
    def beta_full(self) -> np.ndarray:
        """Stacked fixed effects (pre | post) used by the design algebra."""
        return np.concatenate([self.beta, self.beta_post])

    def copy(self) -> "Params":
        kw = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            kw[name] = v.copy() if isinstance(v, np.ndarray) else v
        return Params(**kw)

    @staticmethod
    def zeros(spec: ModelSpec) -> "Params":
        return Params(
            beta=np.zeros(spec.p_pre),
            beta_post=np.zeros(spec.p_post),
            sigma2=1.0,
            omega=np.eye(spec.q),
            psi_hm=np.zeros(spec.hazard_spline_m.dim if spec.survival_enabled else 0),
            psi_m=np.zeros(len(spec.hazard_covariates_m) if spec.survival_enabled else 0),
            alpha_m=np.zeros(len(spec.pre_features) if spec.survival_enabled else 0),
            xi_m=np.zeros(len(spec.post_features) if spec.survival_enabled else 0),
            psi_hd=np.zeros(spec.hazard_spline_d.dim if spec.survival_enabled else 0),
            psi_d=np.zeros(len(spec.hazard_covariates_d) if spec.survival_enabled else 0),
        )


def truncate_history(patient: PatientRecord, t: float) -> PatientRecord:
    """Patient as known at decision time t: measurements up to t, no event yet.

    Requires the patient to be at risk and salvage-free at t.
    """
    if patient.event_time < t:
        raise ValueError(f"patient {patient.id} is not under observation at t={t}")
    if patient.event_time <= t and patient.event != 0:
        raise ValueError(f"patient {patient.id} had an event by t={t}")
    if patient.salvage_time is not None and patient.salvage_time <= t:
        raise ValueError(f"patient {patient.id} already on salvage at t={t}")
    keep = patient.times <= t
    return replace(
        patient,
        times=patient.times[keep],
        y=patient.y[keep],
        salvage_time=None,
        event_time=t,
        event=0,
    )
