"""Read-only HTTP facade over a fitted model for interactive what-if queries.

All endpoints are pure reads of an immutable SessionModel. Request bodies may
carry an explicit seed; when omitted the server draws one and returns it so
the client can replay the request bit-for-bit.
"""

from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FuturesTimeout
from dataclasses import dataclass
from uuid import uuid4

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .causal import (
    EmptyRiskSetError,
    HistoryPredicate,
    marginal_effect,
    variance_conditional,
    variance_marginal,
)
from .core import PatientRecord
from .inference import PosteriorDraws, rhat_summary
from .longitudinal import transform
from .prediction import RiskQuery, conditional_effect, predict_counterfactual_risk
from . import datio

__all__ = ["SessionModel", "create_app"]


@dataclass(frozen=True)
class SessionModel:
    draws: PosteriorDraws
    patients: tuple
    rhat: dict
    default_seed: int = 0
    # cohort-variance requests run synchronously up to this budget, then fall
    # back to a 202 + polling token
    sync_timeout_s: float | None = None

    @staticmethod
    def build(
        draws: PosteriorDraws, patients, default_seed: int = 0, sync_timeout_s=None
    ) -> "SessionModel":
        return SessionModel(
            draws=draws,
            patients=tuple(patients),
            rhat=rhat_summary(draws),
            default_seed=default_seed,
            sync_timeout_s=sync_timeout_s,
        )


class MeasurementIn(BaseModel):
    time: float = Field(ge=0)
    psa: float


class PatientIn(BaseModel):
    id: str = "query-patient"
    covariates: dict[str, float] = Field(default_factory=dict)
    measurements: list[MeasurementIn] = Field(default_factory=list)
    value_scale: str = "psa"


class ConditionalRequest(BaseModel):
    patient: PatientIn
    t: float = Field(ge=0)
    dt: float = Field(ge=0)
    L: int | None = Field(default=None, ge=1)
    variance_m: int = Field(default=0, ge=0)
    seed: int | None = None


class PredicateIn(BaseModel):
    kind: str = "all"
    threshold: float | None = None
    lo: float | None = None
    hi: float | None = None
    window_months: float | None = None


class CohortRequest(BaseModel):
    t: float = Field(ge=0)
    dt: float = Field(ge=0)
    predicate: PredicateIn = Field(default_factory=PredicateIn)
    M: int = Field(default=0, ge=0)
    L: int | None = Field(default=None, ge=1)
    seed: int | None = None


RULE_NONMONOTONE = "TIME_ORDER"
RULE_NEGATIVE_PSA = "NEG_PSA"
RULE_AFTER_DECISION = "AFTER_DECISION_TIME"


def _patient_from_request(body: PatientIn, t: float) -> PatientRecord:
    """Validate the edited history with the same rules the ingester applies."""
    errors = []
    times, ys = [], []
    last = None
    for k, m in enumerate(body.measurements):
        if last is not None and m.time <= last:
            errors.append(
                {"loc": f"measurements[{k}].time", "rule": RULE_NONMONOTONE,
                 "msg": f"time {m.time} not after {last}"}
            )
            continue
        if body.value_scale == "psa" and m.psa < 0:
            errors.append(
                {"loc": f"measurements[{k}].psa", "rule": RULE_NEGATIVE_PSA,
                 "msg": f"negative PSA {m.psa}"}
            )
            continue
        if m.time > t:
            errors.append(
                {"loc": f"measurements[{k}].time", "rule": RULE_AFTER_DECISION,
                 "msg": f"measurement at {m.time} is after the decision time {t}"}
            )
            continue
        times.append(m.time)
        ys.append(float(transform(m.psa)) if body.value_scale == "psa" else m.psa)
        last = m.time
    if errors:
        raise HTTPException(status_code=422, detail=errors)
    return PatientRecord(
        id=body.id,
        covariates=dict(body.covariates),
        times=np.array(times),
        y=np.array(ys),
        salvage_time=None,
        event_time=t,
        event=0,
    )


def _predicate_from_request(p: PredicateIn) -> HistoryPredicate:
    kw = p.model_dump()
    kind = kw.pop("kind")
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return HistoryPredicate(kind=kind, **kw)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=[{"loc": "predicate", "msg": str(exc)}])


def create_app(model: SessionModel) -> FastAPI:
    app = FastAPI(title="salvagejm what-if service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )
    app.state.model = model
    app.state.executor = ThreadPoolExecutor(max_workers=2)
    app.state.pending = {}

    @app.get("/model")
    def model_info():
        m: SessionModel = app.state.model
        if m is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        d = m.draws
        return {
            "spec": datio.spec_to_dict(d.spec),
            "chains": d.config.chains,
            "kept_draws": d.n_draws,
            "n_subjects": len(m.patients),
            "data_digest": d.data_digest,
            "rhat_max": max(m.rhat.values()) if m.rhat else None,
            "seed": d.seed,
        }

    @app.post("/effect/conditional")
    def effect_conditional(body: ConditionalRequest):
        m: SessionModel = app.state.model
        if m is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        seed = body.seed if body.seed is not None else m.default_seed
        patient = _patient_from_request(body.patient, body.t)
        try:
            query = RiskQuery(patient=patient, t=body.t, dt=body.dt, L=body.L, seed=seed)
            pred = predict_counterfactual_risk(query, m.draws)
            if body.variance_m >= 2:
                effect = variance_conditional(
                    patient, body.t, body.dt, m.draws,
                    M=body.variance_m, seed=seed, L=body.L,
                )
            else:
                effect = conditional_effect(query, m.draws)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=[{"loc": "query", "msg": str(exc)}])
        return {
            "seed": seed,
            "effect": effect.to_dict(),
            "risk_treated": pred.point_treated,
            "risk_untreated": pred.point_untreated,
            "interval_treated": pred.interval("treated"),
            "interval_untreated": pred.interval("untreated"),
            "per_draw_treated": pred.pi_treated.tolist(),
            "per_draw_untreated": pred.pi_untreated.tolist(),
        }

    @app.post("/effect/cohort")
    def effect_cohort(body: CohortRequest):
        m: SessionModel = app.state.model
        if m is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        seed = body.seed if body.seed is not None else m.default_seed
        predicate = _predicate_from_request(body.predicate)

        def work():
            if body.M >= 2:
                return variance_marginal(
                    m.patients, body.t, body.dt, m.draws,
                    predicate=predicate, M=body.M, seed=seed, L=body.L,
                )
            return marginal_effect(
                m.patients, body.t, body.dt, m.draws,
                predicate=predicate, seed=seed, L=body.L,
            )

        try:
            if m.sync_timeout_s is None:
                est = work()
            else:
                future = app.state.executor.submit(work)
                try:
                    est = future.result(timeout=m.sync_timeout_s)
                except FuturesTimeout:
                    token = uuid4().hex
                    app.state.pending[token] = future
                    return JSONResponse(status_code=202, content={"token": token, "seed": seed})
        except EmptyRiskSetError as exc:
            raise HTTPException(status_code=404, detail={"msg": str(exc), "n_r": 0})
        return {"seed": seed, "effect": est.to_dict()}

    @app.get("/effect/result/{token}")
    def effect_result(token: str):
        future = app.state.pending.get(token)
        if future is None:
            raise HTTPException(status_code=404, detail="unknown token")
        if not future.done():
            return JSONResponse(status_code=202, content={"token": token})
        del app.state.pending[token]
        try:
            est = future.result()
        except EmptyRiskSetError as exc:
            raise HTTPException(status_code=404, detail={"msg": str(exc), "n_r": 0})
        return {"effect": est.to_dict()}

    return app
