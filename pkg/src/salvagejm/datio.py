"""Data ingestion with rule-tagged validation, serialization, run manifests.

Input formats
-------------
Long measurement file (CSV): columns id, time, value. The schema's
``value_scale`` says whether ``value`` is raw PSA in ng/mL ("psa", transformed
to log(PSA+1) at ingestion, must be >= 0) or an already-transformed value
("log1p", unconstrained sign; this is what the simulator emits).

Outcome file (CSV), one row per patient: id, salvage_time (empty for none;
';'-separated lists keep the first episode), covariate columns, and either
(event_time, event) or the raw triple (metastasis_time, death_time,
censor_time) from which the competing outcome is derived (deaths after
metastasis are ignored).

A nested JSON format carrying the same fields is also accepted.

Every dropped or altered row lands in the validation report with a rule id.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .basis import SplineConfig
from .core import ModelSpec, Params, PatientRecord
from .longitudinal import transform

__all__ = [
    "MeasurementSchema",
    "OutcomeSchema",
    "IngestReport",
    "IngestError",
    "ingest",
    "ingest_json",
    "write_dataset",
    "load_ground_truth",
    "save_ground_truth",
    "save_draws",
    "load_draws",
    "spec_to_dict",
    "spec_from_dict",
    "params_to_dict",
    "params_from_dict",
    "write_manifest",
    "config_digest",
    "effects_to_records",
    "write_effects",
]

DRAWS_FORMAT_VERSION = 1

# validation rule ids
R_SCHEMA = "SCHEMA_ROW"
R_ID_UNKNOWN = "ID_UNKNOWN"
R_EVENT_CODE = "EVENT_CODE"
R_NEG_TIME = "NEG_TIME"
R_NEG_PSA = "NEG_PSA"
R_TIME_DUP = "TIME_DUP"
R_AFTER_EVENT = "AFTER_EVENT"
R_POST_SALVAGE_WINDOW = "POST_SALVAGE_WINDOW"
R_SALVAGE_FIRST = "SALVAGE_FIRST"
R_SALVAGE_AFTER_EVENT = "SALVAGE_AFTER_EVENT"
R_SALVAGE_NONPOSITIVE = "SALVAGE_NONPOSITIVE"
R_DEATH_AFTER_METASTASIS = "DEATH_AFTER_METASTASIS"
R_NO_OUTCOME = "NO_OUTCOME"


class IngestError(ValueError):
    """Raised when the input cannot produce a valid dataset at all."""


@dataclass(frozen=True)
class MeasurementSchema:
    id_col: str = "id"
    time_col: str = "time"
    value_col: str = "psa"
    value_scale: str = "psa"  # "psa" (ng/mL) | "log1p" (already transformed)

    def __post_init__(self):
        if self.value_scale not in ("psa", "log1p"):
            raise ValueError("value_scale must be 'psa' or 'log1p'")


@dataclass(frozen=True)
class OutcomeSchema:
    id_col: str = "id"
    event_time_col: str = "event_time"
    event_col: str = "event"
    salvage_col: str = "salvage_time"
    covariates: tuple[str, ...] = ()
    # optional raw-outcome triple; used when event_time/event are absent
    metastasis_col: str = "metastasis_time"
    death_col: str = "death_time"
    censor_col: str = "censor_time"


@dataclass
class IngestReport:
    entries: list = field(default_factory=list)
    n_patients: int = 0
    n_measurements: int = 0

    def add(self, rule, message, row=None, patient=None):
        self.entries.append(
            {"rule": rule, "message": message, "row": row, "patient": patient}
        )

    @property
    def counts(self) -> dict:
        out = {}
        for e in self.entries:
            out[e["rule"]] = out.get(e["rule"], 0) + 1
        return out

    @property
    def n_dropped(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_measurements": self.n_measurements,
            "rule_counts": self.counts,
            "entries": self.entries,
        }


def _parse_float(s):
    s = (s or "").strip()
    if s == "" or s.lower() in ("na", "nan", "none"):
        return None
    return float(s)


def _parse_salvage(raw, report, rowno, pid):
    if raw is None or str(raw).strip() == "":
        return None
    parts = [p for p in str(raw).split(";") if p.strip() != ""]
    if not parts:
        return None
    if len(parts) > 1:
        report.add(
            R_SALVAGE_FIRST,
            f"{len(parts)} salvage episodes listed; first kept",
            row=rowno,
            patient=pid,
        )
    return float(parts[0])


def _derive_outcome(row, schema: OutcomeSchema, report, rowno, pid):
    """(event_time, event) either direct or from the raw time triple."""
    t_evt = _parse_float(row.get(schema.event_time_col))
    code = row.get(schema.event_col)
    if t_evt is not None and code not in (None, ""):
        code = int(float(code))
        if code not in (0, 1, 2):
            raise ValueError(f"event code {code} not in {{0,1,2}}")
        return t_evt, code
    t_m = _parse_float(row.get(schema.metastasis_col))
    t_d = _parse_float(row.get(schema.death_col))
    t_c = _parse_float(row.get(schema.censor_col))
    if t_m is None and t_d is None and t_c is None:
        raise ValueError("no outcome information")
    if t_m is not None and t_d is not None and t_d >= t_m:
        report.add(
            R_DEATH_AFTER_METASTASIS,
            f"death at {t_d} after metastasis at {t_m} ignored",
            row=rowno,
            patient=pid,
        )
        t_d = None
    candidates = [(t, d) for t, d in ((t_m, 1), (t_d, 2), (t_c, 0)) if t is not None]
    return min(candidates)


def ingest(
    measurements_path,
    outcomes_path,
    mschema: MeasurementSchema = MeasurementSchema(),
    oschema: OutcomeSchema = OutcomeSchema(),
    post_salvage_window: float | None = 1.5,
):
    """Read, validate and preprocess the two-file delimited format.

    Returns (patients, report). Row-level problems are dropped and reported;
    structurally broken files raise IngestError. ``post_salvage_window`` is
    the years of post-salvage measurements kept (None keeps everything).
    """
    report = IngestReport()

    outcomes = {}
    with open(outcomes_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or oschema.id_col not in reader.fieldnames:
            raise IngestError(f"outcome file lacks an {oschema.id_col!r} column")
        for rowno, row in enumerate(reader, start=2):
            pid = (row.get(oschema.id_col) or "").strip()
            if not pid:
                report.add(R_SCHEMA, "missing patient id", row=rowno)
                continue
            try:
                t_evt, code = _derive_outcome(row, oschema, report, rowno, pid)
                if t_evt < 0:
                    raise ValueError("negative event time")
                salvage = _parse_salvage(row.get(oschema.salvage_col), report, rowno, pid)
                cov = {}
                for name in oschema.covariates:
                    v = _parse_float(row.get(name))
                    if v is None:
                        raise ValueError(f"missing covariate {name!r}")
                    cov[name] = v
            except ValueError as exc:
                rule = R_EVENT_CODE if "event code" in str(exc) else R_SCHEMA
                report.add(rule, str(exc), row=rowno, patient=pid)
                continue
            if salvage is not None and salvage <= 0:
                report.add(
                    R_SALVAGE_NONPOSITIVE, f"salvage time {salvage} <= 0 cleared",
                    row=rowno, patient=pid,
                )
                salvage = None
            if salvage is not None and salvage > t_evt:
                report.add(
                    R_SALVAGE_AFTER_EVENT,
                    f"salvage at {salvage} after follow-up end {t_evt} cleared",
                    row=rowno,
                    patient=pid,
                )
                salvage = None
            outcomes[pid] = {
                "event_time": t_evt,
                "event": code,
                "salvage": salvage,
                "cov": cov,
            }

    series = {pid: [] for pid in outcomes}
    with open(measurements_path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {mschema.id_col, mschema.time_col, mschema.value_col}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise IngestError(f"measurement file needs columns {sorted(need)}")
        for rowno, row in enumerate(reader, start=2):
            pid = (row.get(mschema.id_col) or "").strip()
            if pid not in outcomes:
                report.add(R_ID_UNKNOWN, f"no outcome row for id {pid!r}", row=rowno, patient=pid)
                continue
            try:
                t = float(row[mschema.time_col])
                v = float(row[mschema.value_col])
            except (TypeError, ValueError):
                report.add(R_SCHEMA, "unparseable time or value", row=rowno, patient=pid)
                continue
            if t < 0:
                report.add(R_NEG_TIME, f"negative measurement time {t}", row=rowno, patient=pid)
                continue
            if mschema.value_scale == "psa":
                if v < 0:
                    report.add(R_NEG_PSA, f"negative PSA {v}", row=rowno, patient=pid)
                    continue
                y = float(transform(v))
            else:
                y = v
            series[pid].append((t, y, rowno))

    patients = []
    for pid, out in outcomes.items():
        rows = sorted(series[pid])
        t_evt, code, salvage = out["event_time"], out["event"], out["salvage"]
        times, ys = [], []
        for t, y, rowno in rows:
            if times and t == times[-1]:
                report.add(R_TIME_DUP, f"duplicate measurement time {t}", row=rowno, patient=pid)
                continue
            if t > t_evt:
                report.add(
                    R_AFTER_EVENT,
                    f"measurement at {t} after follow-up end {t_evt}",
                    row=rowno,
                    patient=pid,
                )
                continue
            if (
                salvage is not None
                and post_salvage_window is not None
                and t > salvage + post_salvage_window
            ):
                report.add(
                    R_POST_SALVAGE_WINDOW,
                    f"measurement at {t} beyond {post_salvage_window}y after salvage",
                    row=rowno,
                    patient=pid,
                )
                continue
            times.append(t)
            ys.append(y)
        patients.append(
            PatientRecord(
                id=pid,
                covariates=out["cov"],
                times=np.array(times),
                y=np.array(ys),
                salvage_time=salvage,
                event_time=t_evt,
                event=code,
            )
        )
        report.n_measurements += len(times)
    report.n_patients = len(patients)
    return patients, report


def ingest_json(path, post_salvage_window: float | None = 1.5):
    """Nested single-file format: {"value_scale": .., "patients": [...]}."""
    with open(path) as fh:
        doc = json.load(fh)
    scale = doc.get("value_scale", "psa")
    report = IngestReport()
    patients = []
    for k, rec in enumerate(doc.get("patients", [])):
        pid = str(rec.get("id", k))
        try:
            t_evt = float(rec["event_time"])
            code = int(rec["event"])
            if code not in (0, 1, 2):
                raise ValueError(f"event code {code} not in {{0,1,2}}")
            salvage = rec.get("salvage_time")
            salvage = None if salvage is None else float(salvage)
        except (KeyError, TypeError, ValueError) as exc:
            rule = R_EVENT_CODE if "event code" in str(exc) else R_SCHEMA
            report.add(rule, str(exc), row=k, patient=pid)
            continue
        if salvage is not None and salvage > t_evt:
            report.add(R_SALVAGE_AFTER_EVENT, "salvage after follow-up end cleared",
                       row=k, patient=pid)
            salvage = None
        times, ys = [], []
        last_t = None
        for t, v in rec.get("measurements", []):
            t = float(t)
            v = float(v)
            if t < 0:
                report.add(R_NEG_TIME, f"negative time {t}", row=k, patient=pid)
                continue
            if scale == "psa" and v < 0:
                report.add(R_NEG_PSA, f"negative PSA {v}", row=k, patient=pid)
                continue
            if last_t is not None and t <= last_t:
                report.add(R_TIME_DUP, f"nonincreasing time {t}", row=k, patient=pid)
                continue
            if t > t_evt:
                report.add(R_AFTER_EVENT, f"measurement at {t} after follow-up end",
                           row=k, patient=pid)
                continue
            if (
                salvage is not None
                and post_salvage_window is not None
                and t > salvage + post_salvage_window
            ):
                report.add(R_POST_SALVAGE_WINDOW, f"measurement at {t} beyond window",
                           row=k, patient=pid)
                continue
            times.append(t)
            ys.append(float(transform(v)) if scale == "psa" else v)
            last_t = t
        patients.append(
            PatientRecord(
                id=pid,
                covariates={n: float(v) for n, v in rec.get("covariates", {}).items()},
                times=np.array(times),
                y=np.array(ys),
                salvage_time=salvage,
                event_time=t_evt,
                event=code,
            )
        )
        report.n_measurements += len(times)
    report.n_patients = len(patients)
    return patients, report


def write_dataset(patients, out_dir, value_scale: str = "log1p"):
    """Emit the two-file delimited format (the simulator's output schema)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cov_names = sorted({n for p in patients for n in p.covariates})
    mpath = out_dir / "measurements.csv"
    opath = out_dir / "outcomes.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "value"])
        for p in patients:
            for t, y in zip(p.times, p.y):
                v = y if value_scale == "log1p" else float(np.expm1(y))
                w.writerow([p.id, repr(float(t)), repr(float(v))])
    with open(opath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "event_time", "event", "salvage_time"] + cov_names)
        for p in patients:
            s = "" if p.salvage_time is None else repr(float(p.salvage_time))
            w.writerow(
                [p.id, repr(float(p.event_time)), p.event, s]
                + [repr(float(p.covariates.get(n, 0.0))) for n in cov_names]
            )
    schema = {
        "measurements": {"id_col": "id", "time_col": "time", "value_col": "value",
                         "value_scale": value_scale},
        "outcomes": {"id_col": "id", "event_time_col": "event_time", "event_col": "event",
                     "salvage_col": "salvage_time", "covariates": cov_names},
        # simulated cohorts keep their full post-salvage series
        "post_salvage_window": None,
    }
    with open(out_dir / "schema.json", "w") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
    return mpath, opath


# ---------------------------------------------------------------------------
# spec / params / ground-truth serialization


def _spline_to_dict(cfg: SplineConfig | None):
    if cfg is None:
        return None
    return {
        "degree": cfg.degree,
        "internal_knots": list(cfg.internal_knots),
        "boundary_knots": list(cfg.boundary_knots),
    }


def _spline_from_dict(d):
    if d is None:
        return None
    return SplineConfig(
        degree=int(d["degree"]),
        internal_knots=tuple(d["internal_knots"]),
        boundary_knots=tuple(d["boundary_knots"]),
    )


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "time_design": spec.time_design,
        "long_spline": _spline_to_dict(spec.long_spline),
        "covariates": list(spec.covariates),
        "post_design": spec.post_design,
        "form": spec.form,
        "pre_features": list(spec.pre_features),
        "post_features": list(spec.post_features),
        "hazard_covariates_m": list(spec.hazard_covariates_m),
        "hazard_covariates_d": list(spec.hazard_covariates_d),
        "hazard_spline_m": _spline_to_dict(spec.hazard_spline_m),
        "hazard_spline_d": _spline_to_dict(spec.hazard_spline_d),
        "salvage_duration": spec.salvage_duration,
        "duration_interaction": spec.duration_interaction,
        "survival_enabled": spec.survival_enabled,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    for key in ("long_spline", "hazard_spline_m", "hazard_spline_d"):
        d[key] = _spline_from_dict(d.get(key))
    for key in ("covariates", "pre_features", "post_features",
                "hazard_covariates_m", "hazard_covariates_d"):
        d[key] = tuple(d.get(key, ()))
    return ModelSpec(**d)


def params_to_dict(params: Params) -> dict:
    out = {}
    for name in params.__dataclass_fields__:
        v = getattr(params, name)
        out[name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def params_from_dict(d: dict) -> Params:
    kw = {}
    for name, v in d.items():
        kw[name] = np.asarray(v, dtype=float) if isinstance(v, list) else v
    return Params(**kw)


def save_ground_truth(truth, path):
    doc = {
        "scenario": truth.scenario,
        "seed": truth.seed,
        "params": params_to_dict(truth.params),
        "spec": spec_to_dict(truth.spec),
        "u": truth.u.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_ground_truth(path):
    from .simulator import GroundTruth

    with open(path) as fh:
        doc = json.load(fh)
    return GroundTruth(
        params=params_from_dict(doc["params"]),
        spec=spec_from_dict(doc["spec"]),
        u=np.asarray(doc["u"], dtype=float),
        scenario=int(doc["scenario"]),
        seed=int(doc["seed"]),
    )


# ---------------------------------------------------------------------------
# posterior draw storage: columnar npz + versioned manifest


def save_draws(draws, path):
    path = Path(path)
    arrays = {f"theta/{name}": arr for name, arr in draws.blocks.items()}
    arrays["u"] = draws.u
    np.savez_compressed(path, **arrays)
    manifest = {
        "format_version": DRAWS_FORMAT_VERSION,
        "package_version": __version__,
        "blocks": {name: list(arr.shape) for name, arr in draws.blocks.items()},
        "u_shape": list(draws.u.shape),
        "chains": draws.config.chains,
        "warmup": draws.config.warmup,
        "keep": draws.config.keep,
        "thin": draws.config.thin,
        "seed": draws.seed,
        "fixed_blocks": sorted(draws.config.fixed),
        "acceptance": draws.acceptance,
        "data_digest": draws.data_digest,
        "n_subjects": draws.n_subjects,
        "spec": spec_to_dict(draws.spec),
        "priors": draws.priors.to_dict(),
        "scales_warmup_end": draws.scales_warmup_end,
        "scales_final": draws.scales_final,
    }
    mpath = path.with_suffix(path.suffix + ".manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path, mpath


def load_draws(path):
    from .inference import McmcConfig, PosteriorDraws, PriorSpec

    path = Path(path)
    mpath = path.with_suffix(path.suffix + ".manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != DRAWS_FORMAT_VERSION:
        raise IngestError(f"unsupported draws format {manifest['format_version']}")
    with np.load(path) as data:
        blocks = {
            key.split("/", 1)[1]: data[key] for key in data.files if key.startswith("theta/")
        }
        u = data["u"]
    for name, shape in manifest["blocks"].items():
        if name not in blocks or list(blocks[name].shape) != shape:
            raise IngestError(f"draws file does not match manifest for block {name!r}")
    return PosteriorDraws(
        blocks=blocks,
        u=u,
        acceptance=manifest["acceptance"],
        seed=manifest["seed"],
        config=McmcConfig(
            chains=manifest["chains"],
            warmup=manifest["warmup"],
            keep=manifest["keep"],
            thin=manifest["thin"],
            seed=manifest["seed"],
        ),
        spec=spec_from_dict(manifest["spec"]),
        priors=PriorSpec.from_dict(manifest["priors"]),
        data_digest=manifest["data_digest"],
        scales_warmup_end=manifest["scales_warmup_end"],
        scales_final=manifest["scales_final"],
        n_subjects=manifest["n_subjects"],
    )


# ---------------------------------------------------------------------------
# manifests and effect reports


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command: str, seed, config: dict, inputs: dict = None):
    """Reproducibility record: package version, seed, config digest, input digests."""
    manifest = {
        "package_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "config_digest": config_digest(config),
        "inputs": inputs or {},
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def effects_to_records(estimates) -> list:
    """One structured record per (type, t, dt, predicate)."""
    return [e.to_dict() for e in estimates]


def write_effects(estimates, out_dir):
    """JSON records plus columnar plot-data files (no rendering)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = effects_to_records(estimates)
    with open(out_dir / "effects.json", "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
    with open(out_dir / "effects_plotdata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "effect_type", "predicate", "t", "dt", "point",
                "var_lo", "var_hi", "quant_lo", "quant_hi", "n_r",
                "resample_var", "posterior_var", "total_var",
            ]
        )
        for r in records:
            vlo, vhi = r["normal_interval"] or (None, None)
            qlo, qhi = r["quantile_interval"] or (None, None)
            w.writerow(
                [
                    r["effect_type"], r["predicate"] or "", r["t"], r["dt"], r["point"],
                    vlo, vhi, qlo, qhi, r["n_r"],
                    r["resample_var"], r["posterior_var"], r["total_var"],
                ]
            )
    return out_dir / "effects.json"
