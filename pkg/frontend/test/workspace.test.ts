import { describe, expect, it } from 'vitest';

import {
  addMeasurement,
  cohortRequest,
  conditionalRequest,
  DEFAULT_DT,
  DEFAULT_PREDICATE,
  DT_GRID,
  emptyWorkspace,
  removeMeasurement,
  setDecisionTime,
  setHorizon,
  updateMeasurement,
  workspaceFromPayload,
} from '../src/workspace';

describe('workspace editing', () => {
  it('adds a measurement to an empty series', () => {
    const res = addMeasurement(emptyWorkspace(), { time: 5.2, psa: 0.8 });
    expect(res.ok).toBe(true);
    if (res.ok) {
      expect(res.workspace.series).toEqual([{ time: 5.2, psa: 0.8 }]);
    }
  });

  it('rejects nonmonotone (duplicate) time with the server rule id', () => {
    let ws = emptyWorkspace();
    const first = addMeasurement(ws, { time: 1.0, psa: 0.5 });
    if (!first.ok) throw new Error('setup');
    ws = first.workspace;
    const res = addMeasurement(ws, { time: 1.0, psa: 0.9 });
    expect(res.ok).toBe(false);
    if (!res.ok) {
      expect(res.errors[0].rule).toBe('TIME_ORDER');
    }
  });

  it('rejects negative PSA with the server rule id', () => {
    const res = addMeasurement(emptyWorkspace(), { time: 1.0, psa: -0.2 });
    expect(res.ok).toBe(false);
    if (!res.ok) expect(res.errors[0].rule).toBe('NEG_PSA');
  });

  it('blocks a submit whose series extends past the decision time', () => {
    // entry of late points is allowed; the request path rejects them with
    // the server's rule id until t is moved up
    const res = addMeasurement(emptyWorkspace(), { time: 99.0, psa: 0.2 });
    expect(res.ok).toBe(true);
    if (res.ok) {
      const check = setDecisionTime(res.workspace, 5);
      expect(check.ok).toBe(false);
      if (!check.ok) expect(check.errors[0].rule).toBe('AFTER_DECISION_TIME');
    }
  });

  it('keeps the series sorted and supports remove/update', () => {
    let ws = emptyWorkspace();
    for (const m of [{ time: 3.0, psa: 0.4 }, { time: 1.0, psa: 0.2 }]) {
      const res = addMeasurement(ws, m);
      if (!res.ok) throw new Error('setup');
      ws = res.workspace;
    }
    expect(ws.series.map((m) => m.time)).toEqual([1.0, 3.0]);
    const upd = updateMeasurement(ws, 0, { time: 2.0, psa: 0.3 });
    expect(upd.ok).toBe(true);
    if (upd.ok) expect(upd.workspace.series.map((m) => m.time)).toEqual([2.0, 3.0]);
    const rm = removeMeasurement(ws, 1);
    if (rm.ok) expect(rm.workspace.series.length).toBe(1);
  });

  it('moving the decision time re-validates the series', () => {
    let ws = emptyWorkspace();
    const added = addMeasurement(ws, { time: 4.0, psa: 0.5 });
    if (!added.ok) throw new Error('setup');
    ws = added.workspace;
    const bad = setDecisionTime(ws, 3.0);
    expect(bad.ok).toBe(false);
    if (!bad.ok) expect(bad.errors[0].rule).toBe('AFTER_DECISION_TIME');
    const good = setDecisionTime(ws, 6.0);
    expect(good.ok).toBe(true);
  });

  it('defaults follow the decision-window and cohort-threshold conventions', () => {
    const ws = emptyWorkspace();
    expect(ws.dt).toBe(DEFAULT_DT);
    expect(DEFAULT_DT).toBe(2);
    expect(DT_GRID[0]).toBe(0.5);
    expect(DT_GRID[DT_GRID.length - 1]).toBe(5);
    expect(DEFAULT_PREDICATE).toEqual({ kind: 'last_value_above', threshold: 0.5 });
    expect(ws.cohortPredicate).toEqual(DEFAULT_PREDICATE);
  });

  it('round-trips through the service payload', () => {
    let ws = emptyWorkspace('p-42');
    for (const m of [{ time: 1.0, psa: 0.2 }, { time: 2.5, psa: 0.6 }]) {
      const res = addMeasurement(ws, m);
      if (!res.ok) throw new Error('setup');
      ws = res.workspace;
    }
    const tset = setDecisionTime(ws, 4.0);
    if (!tset.ok) throw new Error('setup');
    ws = tset.workspace;
    const dset = setHorizon(ws, 3.0);
    if (!dset.ok) throw new Error('setup');
    ws = dset.workspace;
    const req = conditionalRequest(ws);
    const back = workspaceFromPayload(req);
    expect(back.series).toEqual(ws.series);
    expect(back.t).toBe(ws.t);
    expect(back.dt).toBe(ws.dt);
    expect(conditionalRequest(back)).toEqual(req);
    const coh = cohortRequest(ws);
    expect(coh.predicate.kind).toBe('last_value_above');
    expect(coh.t).toBe(4.0);
  });
});
