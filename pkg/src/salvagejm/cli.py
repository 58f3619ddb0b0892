"""Command-line interface: fit, diagnose, predict, effects, simulate, serve.

Exit codes: 0 success, 1 validation failure, 2 numerical failure, 64 usage.
Every run writes a manifest (versions, seed, config digest) into its output
directory; identical seed and inputs give byte-identical outputs.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datio
from .causal import EmptyRiskSetError, HistoryPredicate, marginal_effect, variance_conditional, variance_marginal
from .core import ModelSpec
from .inference import (
    FitData,
    McmcConfig,
    PosteriorDraws,
    PriorSpec,
    information_criteria,
    rhat_summary,
    run_mcmc,
)
from .prediction import RiskQuery, conditional_effect, predict_counterfactual_risk
from .simulator import ScenarioSpec, simulate_dataset

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser() -> _Parser:
    p = _Parser(prog="salvagejm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_data_args(sp):
        sp.add_argument("--measurements", help="long-format measurement CSV")
        sp.add_argument("--outcomes", help="per-patient outcome CSV")
        sp.add_argument("--data-json", help="nested single-file dataset (alternative)")
        sp.add_argument("--schema", help="schema JSON written by `simulate` / custom")

    fit = sub.add_parser("fit", help="fit the joint model by MCMC")
    add_data_args(fit)
    fit.add_argument("--spec", help="model spec JSON (defaults derived from data)")
    fit.add_argument("--priors", help="prior spec JSON")
    fit.add_argument("--chains", type=int, default=3)
    fit.add_argument("--warmup", type=int, default=3000)
    fit.add_argument("--keep", type=int, default=3000)
    fit.add_argument("--thin", type=int, default=1)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True)

    diag = sub.add_parser("diagnose", help="convergence and information criteria")
    add_data_args(diag)
    diag.add_argument("--fit", required=True, help="directory written by fit")
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--out")

    pred = sub.add_parser("predict", help="counterfactual risk for one patient")
    pred.add_argument("--fit", required=True)
    pred.add_argument("--patient", required=True, help="patient JSON file")
    pred.add_argument("--t", type=float, required=True)
    pred.add_argument("--dt", type=float, required=True)
    pred.add_argument("--mc-draws", type=int, default=None)
    pred.add_argument("--seed", type=int, default=0)
    pred.add_argument("--out")

    eff = sub.add_parser("effects", help="cohort effect estimates over decision times")
    add_data_args(eff)
    eff.add_argument("--fit", required=True)
    eff.add_argument("--t", required=True, help="comma-separated decision times")
    eff.add_argument("--dt", type=float, required=True)
    eff.add_argument(
        "--predicate",
        default="all",
        help="all | last-value-above:C | elevated-in-window:C:MONTHS | range:LO:HI",
    )
    eff.add_argument("--types", default="marginal,marginal-conditional")
    eff.add_argument("--patient-ids", default="", help="ids for conditional effects")
    eff.add_argument("--variance-m", type=int, default=0, help="resamples; 0 skips variance")
    eff.add_argument("--mc-draws", type=int, default=None)
    eff.add_argument("--seed", type=int, default=0)
    eff.add_argument("--out", required=True)

    sim = sub.add_parser("simulate", help="generate a confounded synthetic cohort")
    sim.add_argument("--scenario", type=int, default=1, choices=(1, 2, 3))
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)

    srv = sub.add_parser("serve", help="start the read-only what-if service")
    add_data_args(srv)
    srv.add_argument("--fit", required=True)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8008)
    srv.add_argument("--seed", type=int, default=0)
    return p


def _load_schemas(args):
    mschema = datio.MeasurementSchema()
    oschema = datio.OutcomeSchema()
    window = 1.5
    if args.schema:
        with open(args.schema) as fh:
            doc = json.load(fh)
        mschema = datio.MeasurementSchema(**doc.get("measurements", {}))
        od = dict(doc.get("outcomes", {}))
        od["covariates"] = tuple(od.get("covariates", ()))
        oschema = datio.OutcomeSchema(**od)
        window = doc.get("post_salvage_window", 1.5)
    return mschema, oschema, window


def _load_patients(args):
    if args.data_json:
        patients, report = datio.ingest_json(args.data_json)
    elif args.measurements and args.outcomes:
        mschema, oschema, window = _load_schemas(args)
        patients, report = datio.ingest(
            args.measurements, args.outcomes, mschema, oschema, post_salvage_window=window
        )
    else:
        raise datio.IngestError("provide --data-json or --measurements with --outcomes")
    return patients, report


def default_spec(patients) -> ModelSpec:
    """Cubic trajectory spline + quadratic baseline-hazard splines from the data."""
    from .basis import SplineConfig

    t_max = max(max((p.times[-1] if p.n_obs else 0.0) for p in patients),
                max(p.event_time for p in patients))
    hi = float(t_max) * 1.001
    event_times = sorted(p.event_time for p in patients if p.event != 0) or [hi / 2]
    qs = np.quantile(event_times, [0.25, 0.5, 0.75])
    internal = tuple(float(v) for v in sorted(set(np.round(qs, 3))) if 0 < v < hi)
    meas = [p.times for p in patients if p.n_obs]
    meas_times = np.concatenate(meas) if meas else np.array([hi / 2])
    lq = np.quantile(meas_times, [0.2, 0.4, 0.6, 0.8])
    long_internal = tuple(float(v) for v in sorted(set(np.round(lq, 3))) if 0 < v < hi)
    cov = sorted(set.intersection(*(set(p.covariates) for p in patients))) if patients else []
    return ModelSpec(
        time_design="bspline",
        long_spline=SplineConfig(3, long_internal, (0.0, hi)),
        covariates=tuple(cov),
        form="M1",
        hazard_covariates_m=tuple(cov),
        hazard_covariates_d=(),
        hazard_spline_m=SplineConfig(2, internal, (0.0, hi)),
        hazard_spline_d=SplineConfig(2, internal, (0.0, hi)),
    )


def parse_predicate(text: str) -> HistoryPredicate:
    parts = text.split(":")
    kind = parts[0]
    if kind == "all":
        return HistoryPredicate()
    if kind == "last-value-above":
        return HistoryPredicate(kind="last_value_above", threshold=float(parts[1]))
    if kind == "elevated-in-window":
        return HistoryPredicate(
            kind="elevated_in_window", threshold=float(parts[1]), window_months=float(parts[2])
        )
    if kind == "range":
        return HistoryPredicate(kind="range", lo=float(parts[1]), hi=float(parts[2]))
    raise ValueError(f"cannot parse predicate {text!r}")


def _patient_from_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    doc2 = {"value_scale": doc.get("value_scale", "psa"), "patients": [doc]}
    tmp = Path(path).with_suffix(".tmp_ingest.json")
    try:
        with open(tmp, "w") as fh:
            json.dump(doc2, fh)
        patients, report = datio.ingest_json(tmp)
    finally:
        tmp.unlink(missing_ok=True)
    if not patients:
        raise datio.IngestError(f"patient file invalid: {report.entries}")
    return patients[0]


def cmd_fit(args) -> int:
    patients, report = _load_patients(args)
    if args.spec:
        with open(args.spec) as fh:
            spec = datio.spec_from_dict(json.load(fh))
    else:
        spec = default_spec(patients)
    priors = PriorSpec()
    if args.priors:
        with open(args.priors) as fh:
            priors = PriorSpec.from_dict(json.load(fh))
    config = McmcConfig(
        chains=args.chains, warmup=args.warmup, keep=args.keep, thin=args.thin, seed=args.seed
    )
    draws = run_mcmc(patients, spec, priors, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datio.save_draws(draws, out / "draws.npz")
    with open(out / "ingest_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out / "spec.json", "w") as fh:
        json.dump(datio.spec_to_dict(spec), fh, indent=2, sort_keys=True)
    datio.write_manifest(
        out,
        "fit",
        args.seed,
        {
            "chains": args.chains,
            "warmup": args.warmup,
            "keep": args.keep,
            "thin": args.thin,
            "spec": datio.spec_to_dict(spec),
            "priors": priors.to_dict(),
        },
        inputs=_input_digests(args),
    )
    print(f"fit complete: {draws.n_draws} draws over {args.chains} chains -> {out}")
    return EXIT_OK


def _input_digests(args) -> dict:
    out = {}
    for name in ("measurements", "outcomes", "data_json", "spec", "priors", "patient"):
        path = getattr(args, name, None)
        if path:
            out[name] = datio.file_digest(path)
    return out


def cmd_diagnose(args) -> int:
    draws = PosteriorDraws.load(Path(args.fit) / "draws.npz")
    patients, _ = _load_patients(args)
    fit = FitData(patients, draws.spec)
    rs = rhat_summary(draws)
    ic = information_criteria(draws, fit)
    table = {
        "DIC": ic.dic,
        "WAIC": ic.waic,
        "LPML": ic.lpml,
        "p_D": ic.p_d,
        "p_WAIC": ic.p_waic,
        "cpo_excluded": ic.cpo_excluded,
    }
    print("criterion        value")
    for k in ("DIC", "WAIC", "LPML"):
        print(f"{k:12s} {table[k]:16.2f}")
    print(f"max rhat     {max(rs.values()):16.4f}")
    print(f"acceptance   " + ", ".join(f"{k}={v:.2f}" for k, v in sorted(draws.acceptance.items())))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "diagnostics.json", "w") as fh:
            json.dump(
                {"information_criteria": table, "rhat": rs, "acceptance": draws.acceptance},
                fh, indent=2, sort_keys=True,
            )
        datio.write_manifest(out, "diagnose", args.seed, {"fit": str(args.fit)},
                             inputs=_input_digests(args))
    return EXIT_OK


def cmd_predict(args) -> int:
    draws = PosteriorDraws.load(Path(args.fit) / "draws.npz")
    patient = _patient_from_json(args.patient)
    query = RiskQuery(patient=patient, t=args.t, dt=args.dt, L=args.mc_draws, seed=args.seed)
    pred = predict_counterfactual_risk(query, draws)
    eff = conditional_effect(query, draws)
    doc = {
        "t": args.t,
        "dt": args.dt,
        "seed": args.seed,
        "risk_treated": pred.point_treated,
        "risk_untreated": pred.point_untreated,
        "interval_treated": pred.interval("treated"),
        "interval_untreated": pred.interval("untreated"),
        "effect": eff.to_dict(),
        "per_draw_treated": pred.pi_treated.tolist(),
        "per_draw_untreated": pred.pi_untreated.tolist(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.json").write_text(text + "\n")
        datio.write_manifest(out, "predict", args.seed,
                             {"t": args.t, "dt": args.dt, "L": args.mc_draws},
                             inputs=_input_digests(args))
    print(text)
    return EXIT_OK


def cmd_effects(args) -> int:
    draws = PosteriorDraws.load(Path(args.fit) / "draws.npz")
    patients, _ = _load_patients(args)
    predicate = parse_predicate(args.predicate)
    ts = [float(v) for v in args.t.split(",") if v.strip()]
    types = [s.strip() for s in args.types.split(",") if s.strip()]
    ids = [s.strip() for s in args.patient_ids.split(",") if s.strip()]
    by_id = {p.id: p for p in patients}
    estimates = []
    for t in ts:
        if "marginal" in types:
            estimates.append(_cohort_effect(patients, t, args, draws, HistoryPredicate()))
        if "marginal-conditional" in types:
            estimates.append(_cohort_effect(patients, t, args, draws, predicate))
        if "conditional" in types:
            for pid in ids:
                if pid not in by_id:
                    raise datio.IngestError(f"unknown patient id {pid!r}")
                if args.variance_m >= 2:
                    estimates.append(
                        variance_conditional(
                            by_id[pid], t, args.dt, draws, M=args.variance_m,
                            seed=args.seed, L=args.mc_draws,
                        )
                    )
                else:
                    estimates.append(
                        conditional_effect(
                            RiskQuery(patient=by_id[pid], t=t, dt=args.dt,
                                      L=args.mc_draws, seed=args.seed),
                            draws,
                        )
                    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datio.write_effects(estimates, out)
    datio.write_manifest(
        out,
        "effects",
        args.seed,
        {
            "t": ts, "dt": args.dt, "predicate": args.predicate, "types": types,
            "variance_m": args.variance_m, "L": args.mc_draws, "patient_ids": ids,
        },
        inputs=_input_digests(args),
    )
    for e in estimates:
        iv = e.normal_interval or e.quantile_interval
        print(
            f"{e.effect_type:21s} t={e.t:5.2f} dt={e.dt:4.2f} "
            f"point={e.point:+.5f} interval=({iv[0]:+.5f}, {iv[1]:+.5f}) n_r={e.n_r}"
        )
    return EXIT_OK


def _cohort_effect(patients, t, args, draws, predicate):
    if args.variance_m >= 2:
        return variance_marginal(
            patients, t, args.dt, draws, predicate=predicate, M=args.variance_m,
            seed=args.seed, L=args.mc_draws,
        )
    return marginal_effect(
        patients, t, args.dt, draws, predicate=predicate, seed=args.seed, L=args.mc_draws
    )


def cmd_simulate(args) -> int:
    spec = ScenarioSpec(scenario=args.scenario, n=args.n, seed=args.seed)
    patients, truth = simulate_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datio.write_dataset(patients, out)
    datio.save_ground_truth(truth, out / "ground_truth.json")
    datio.write_manifest(out, "simulate", args.seed,
                         {"scenario": args.scenario, "n": args.n})
    n_events = sum(1 for p in patients if p.event == 1)
    print(f"simulated {len(patients)} subjects ({n_events} metastases) -> {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import SessionModel, create_app

    draws = PosteriorDraws.load(Path(args.fit) / "draws.npz")
    patients, _ = _load_patients(args)
    app = create_app(SessionModel.build(draws, patients, default_seed=args.seed))
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "predict": cmd_predict,
    "effects": cmd_effects,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (datio.IngestError, EmptyRiskSetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
