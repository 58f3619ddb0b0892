/**
 * Types mirroring the what-if service JSON API.
 */

export interface Measurement {
  time: number;
  psa: number;
}

export interface PatientPayload {
  id: string;
  covariates: Record<string, number>;
  measurements: Measurement[];
  value_scale: 'psa';
}

export interface ConditionalRequest {
  patient: PatientPayload;
  t: number;
  dt: number;
  L?: number | null;
  variance_m?: number;
  seed?: number | null;
}

export interface PredicatePayload {
  kind: 'all' | 'last_value_above' | 'elevated_in_window' | 'range';
  threshold?: number;
  lo?: number;
  hi?: number;
  window_months?: number;
}

export interface CohortRequest {
  t: number;
  dt: number;
  predicate: PredicatePayload;
  M?: number;
  L?: number | null;
  seed?: number | null;
}

export interface EffectEstimate {
  effect_type: 'marginal' | 'conditional' | 'marginal-conditional';
  t: number;
  dt: number;
  point: number;
  n_r: number | null;
  resample_var: number | null;
  posterior_var: number | null;
  total_var: number | null;
  normal_interval: [number, number] | null;
  quantile_interval: [number, number] | null;
  predicate: string | null;
}

export interface ConditionalResponse {
  seed: number;
  effect: EffectEstimate;
  risk_treated: number;
  risk_untreated: number;
  interval_treated: [number, number];
  interval_untreated: [number, number];
  per_draw_treated: number[];
  per_draw_untreated: number[];
}

export interface CohortResponse {
  seed: number;
  effect: EffectEstimate;
}

export interface ModelInfo {
  chains: number;
  kept_draws: number;
  n_subjects: number;
  data_digest: string;
  rhat_max: number | null;
  seed: number;
}

export interface FieldError {
  loc: string;
  rule: string;
  msg: string;
}
