/**
 * Browser bootstrap: wires the workspace editor to the service client and
 * mounts rendered comparisons. All numerics come from service responses.
 */

import { WhatIfClient, ServiceError } from './client';
import { renderCohortReference, renderComparison, renderRiskCurves, VNode } from './render';
import {
  addMeasurement,
  cohortRequest,
  conditionalRequest,
  DT_GRID,
  emptyWorkspace,
  PatientWorkspace,
  recordQuery,
  removeMeasurement,
  setDecisionTime,
  setHorizon,
} from './workspace';

function materialize(node: VNode): HTMLElement {
  const dom = document.createElement(node.tag);
  for (const [k, v] of Object.entries(node.attrs)) dom.setAttribute(k, v);
  if (node.text !== undefined) dom.textContent = node.text;
  for (const child of node.children) dom.appendChild(materialize(child));
  return dom;
}

function showErrors(errors: Array<{ loc?: string; rule?: string; msg?: string }>) {
  const box = document.getElementById('errors')!;
  box.innerHTML = '';
  for (const err of errors) {
    const li = document.createElement('li');
    li.textContent = `[${err.rule ?? 'SERVER'}] ${err.loc ?? ''}: ${err.msg ?? ''}`;
    box.appendChild(li);
  }
}

export function startApp(baseUrl: string) {
  const client = new WhatIfClient(baseUrl);
  let ws: PatientWorkspace = emptyWorkspace();
  let counter = 0;

  const seriesList = document.getElementById('series')!;
  const results = document.getElementById('results')!;

  function redrawSeries() {
    seriesList.innerHTML = '';
    ws.series.forEach((m, k) => {
      const li = document.createElement('li');
      li.textContent = `t=${m.time}y  PSA=${m.psa} ng/mL `;
      const rm = document.createElement('button');
      rm.textContent = 'remove';
      rm.onclick = () => {
        const res = removeMeasurement(ws, k);
        if (res.ok) {
          ws = res.workspace;
          redrawSeries();
        }
      };
      li.appendChild(rm);
      seriesList.appendChild(li);
    });
  }

  (document.getElementById('add') as HTMLButtonElement).onclick = () => {
    const time = Number((document.getElementById('in-time') as HTMLInputElement).value);
    const psa = Number((document.getElementById('in-psa') as HTMLInputElement).value);
    const res = addMeasurement(ws, { time, psa });
    if (!res.ok) {
      showErrors(res.errors);
      return;
    }
    showErrors([]);
    ws = res.workspace;
    redrawSeries();
  };

  (document.getElementById('run') as HTMLButtonElement).onclick = async () => {
    const t = Number((document.getElementById('in-t') as HTMLInputElement).value);
    const dt = Number((document.getElementById('in-dt') as HTMLInputElement).value);
    let res = setDecisionTime(ws, t);
    if (!res.ok) return showErrors(res.errors);
    ws = res.workspace;
    res = setHorizon(ws, dt);
    if (!res.ok) return showErrors(res.errors);
    ws = res.workspace;
    showErrors([]);
    client.beginSubmission();
    try {
      const response = await client.conditional(conditionalRequest(ws));
      const cohort = await client.cohort(cohortRequest(ws));
      ws = recordQuery(ws, { request: conditionalRequest(ws), response, cohort });
      const id = `r${counter++}`;
      results.innerHTML = '';
      results.appendChild(materialize(renderComparison(id, response)));
      results.appendChild(materialize(renderCohortReference(`${id}-cohort`, cohort)));
      // paired risk curves over the horizon grid, reusing the replay seed
      const curve: Array<{ dt: number; responseId: string; resp: typeof response }> = [];
      for (const gridDt of DT_GRID) {
        const resp = await client.conditional({ ...conditionalRequest(ws), dt: gridDt });
        curve.push({ dt: gridDt, responseId: `${id}-dt${gridDt}`, resp });
      }
      results.appendChild(materialize(renderRiskCurves(curve)));
    } catch (err) {
      if (err instanceof ServiceError) {
        showErrors(Array.isArray(err.detail) ? (err.detail as never[]) : [{ msg: String(err.detail) }]);
      } else if ((err as Error).name !== 'AbortError') {
        showErrors([{ msg: String(err) }]);
      }
    }
  };

  redrawSeries();
}
