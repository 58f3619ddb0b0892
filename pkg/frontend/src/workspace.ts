/**
 * PatientWorkspace: the editable what-if state and its edit operations.
 *
 * Edits are validated before they land; an invalid edit leaves the workspace
 * untouched and returns the rule-tagged errors.
 */

import type {
  CohortRequest,
  CohortResponse,
  ConditionalRequest,
  ConditionalResponse,
  FieldError,
  Measurement,
  PredicatePayload,
} from './types';
import { validateMeasurement, validateSeries } from './validation';

export interface QueryRecord {
  request: ConditionalRequest;
  response: ConditionalResponse;
  cohort?: CohortResponse;
}

export interface PatientWorkspace {
  patientId: string;
  covariates: Record<string, number>;
  series: Measurement[];
  t: number;
  dt: number;
  cohortPredicate: PredicatePayload;
  seed: number | null;
  history: QueryRecord[];
}

// dt explored over {0.5, 1, ..., 5}; 2 years is the default decision window,
// and the cohort reference is patients whose last PSA is at least 0.5 ng/mL
export const DT_GRID = [0.5, 1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5];
export const DEFAULT_DT = 2;
export const DEFAULT_PREDICATE: PredicatePayload = {
  kind: 'last_value_above',
  threshold: 0.5,
};

export function emptyWorkspace(patientId = 'what-if-patient'): PatientWorkspace {
  return {
    patientId,
    covariates: {},
    series: [],
    t: 5,
    dt: DEFAULT_DT,
    cohortPredicate: { ...DEFAULT_PREDICATE },
    seed: null,
    history: [],
  };
}

export type EditResult =
  | { ok: true; workspace: PatientWorkspace }
  | { ok: false; errors: FieldError[] };

export function addMeasurement(ws: PatientWorkspace, m: Measurement): EditResult {
  // the decision time is enforced when a request is built (validateSeries),
  // not at entry time: points beyond the current t stay editable
  const errors = validateMeasurement(m, ws.series, Infinity);
  if (errors.length) return { ok: false, errors };
  const series = [...ws.series, m].sort((a, b) => a.time - b.time);
  return { ok: true, workspace: { ...ws, series } };
}

export function removeMeasurement(ws: PatientWorkspace, index: number): EditResult {
  if (index < 0 || index >= ws.series.length) {
    return { ok: false, errors: [{ loc: 'index', rule: 'NO_SUCH_ROW', msg: `no row ${index}` }] };
  }
  const series = ws.series.filter((_, k) => k !== index);
  return { ok: true, workspace: { ...ws, series } };
}

export function updateMeasurement(ws: PatientWorkspace, index: number, m: Measurement): EditResult {
  if (index < 0 || index >= ws.series.length) {
    return { ok: false, errors: [{ loc: 'index', rule: 'NO_SUCH_ROW', msg: `no row ${index}` }] };
  }
  const others = ws.series.filter((_, k) => k !== index);
  const errors = validateMeasurement(m, others, Infinity);
  if (errors.length) return { ok: false, errors };
  const series = [...others, m].sort((a, b) => a.time - b.time);
  return { ok: true, workspace: { ...ws, series } };
}

export function setDecisionTime(ws: PatientWorkspace, t: number): EditResult {
  if (t <= 0) {
    return { ok: false, errors: [{ loc: 't', rule: 'BAD_DECISION_TIME', msg: 't must be > 0' }] };
  }
  const errors = validateSeries(ws.series, t);
  if (errors.length) return { ok: false, errors };
  return { ok: true, workspace: { ...ws, t } };
}

export function setHorizon(ws: PatientWorkspace, dt: number): EditResult {
  if (!(dt >= 0)) {
    return { ok: false, errors: [{ loc: 'dt', rule: 'BAD_HORIZON', msg: 'dt must be >= 0' }] };
  }
  return { ok: true, workspace: { ...ws, dt } };
}

export function conditionalRequest(ws: PatientWorkspace): ConditionalRequest {
  return {
    patient: {
      id: ws.patientId,
      covariates: { ...ws.covariates },
      measurements: ws.series.map((m) => ({ ...m })),
      value_scale: 'psa',
    },
    t: ws.t,
    dt: ws.dt,
    seed: ws.seed,
  };
}

export function cohortRequest(ws: PatientWorkspace): CohortRequest {
  return {
    t: ws.t,
    dt: ws.dt,
    predicate: { ...ws.cohortPredicate },
    seed: ws.seed,
  };
}

/** Round-trip helper: a workspace rebuilt from its own payload. */
export function workspaceFromPayload(req: ConditionalRequest): PatientWorkspace {
  return {
    ...emptyWorkspace(req.patient.id),
    covariates: { ...req.patient.covariates },
    series: req.patient.measurements.map((m) => ({ ...m })),
    t: req.t,
    dt: req.dt,
    seed: req.seed ?? null,
  };
}

export function recordQuery(
  ws: PatientWorkspace,
  record: QueryRecord,
): PatientWorkspace {
  // replaying with the returned seed reproduces the numbers bit for bit
  return { ...ws, seed: record.response.seed, history: [...ws.history, record] };
}
