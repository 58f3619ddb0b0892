/**
 * Client-side history validation.
 *
 * Rule ids match the server exactly so a rejected edit shows the same code
 * the service would return; anything rejected here would 422 there.
 */

import type { FieldError, Measurement } from './types';

export const RULE_NONMONOTONE = 'TIME_ORDER';
export const RULE_NEGATIVE_PSA = 'NEG_PSA';
export const RULE_AFTER_DECISION = 'AFTER_DECISION_TIME';
export const RULE_NEGATIVE_TIME = 'NEG_TIME';

export function validateMeasurement(
  m: Measurement,
  series: Measurement[],
  decisionTime: number,
): FieldError[] {
  const errors: FieldError[] = [];
  if (m.time < 0) {
    errors.push({ loc: 'time', rule: RULE_NEGATIVE_TIME, msg: `negative time ${m.time}` });
  }
  if (m.psa < 0) {
    errors.push({ loc: 'psa', rule: RULE_NEGATIVE_PSA, msg: `negative PSA ${m.psa}` });
  }
  if (m.time > decisionTime) {
    errors.push({
      loc: 'time',
      rule: RULE_AFTER_DECISION,
      msg: `measurement at ${m.time} is after the decision time ${decisionTime}`,
    });
  }
  if (series.some((s) => s.time === m.time)) {
    errors.push({ loc: 'time', rule: RULE_NONMONOTONE, msg: `duplicate time ${m.time}` });
  }
  return errors;
}

/** Full-series check used before a request goes out. */
export function validateSeries(series: Measurement[], decisionTime: number): FieldError[] {
  const errors: FieldError[] = [];
  let last = -Infinity;
  series.forEach((m, k) => {
    if (m.time <= last) {
      errors.push({
        loc: `measurements[${k}].time`,
        rule: RULE_NONMONOTONE,
        msg: `time ${m.time} not after ${last}`,
      });
      return;
    }
    if (m.psa < 0) {
      errors.push({
        loc: `measurements[${k}].psa`,
        rule: RULE_NEGATIVE_PSA,
        msg: `negative PSA ${m.psa}`,
      });
      return;
    }
    if (m.time > decisionTime) {
      errors.push({
        loc: `measurements[${k}].time`,
        rule: RULE_AFTER_DECISION,
        msg: `measurement at ${m.time} is after the decision time ${decisionTime}`,
      });
      return;
    }
    last = m.time;
  });
  return errors;
}
