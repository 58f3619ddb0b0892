/**
 * Pure rendering: service responses to a lightweight node tree.
 *
 * Every displayed number carries data-source="<responseId>.<fieldPath>" and
 * data-value with the raw response value, so any figure on screen is
 * traceable to the service payload that produced it. The tree is plain data;
 * the browser bootstrap turns it into DOM.
 */

import type { CohortResponse, ConditionalResponse } from './types';

export interface VNode {
  tag: string;
  attrs: Record<string, string>;
  children: VNode[];
  text?: string;
}

export function el(
  tag: string,
  attrs: Record<string, string> = {},
  children: VNode[] = [],
  text?: string,
): VNode {
  return { tag, attrs, children, text };
}

function num(
  responseId: string,
  path: string,
  value: number,
  digits = 4,
  cls = 'value',
): VNode {
  return el(
    'span',
    {
      class: cls,
      'data-source': `${responseId}.${path}`,
      'data-value': String(value),
    },
    [],
    value.toFixed(digits),
  );
}

function riskRow(responseId: string, label: string, arm: 'treated' | 'untreated',
                 point: number, interval: [number, number]): VNode {
  return el('tr', { class: `risk-${arm}` }, [
    el('td', {}, [], label),
    el('td', {}, [num(responseId, `risk_${arm}`, point)]),
    el('td', {}, [
      num(responseId, `interval_${arm}[0]`, interval[0]),
      el('span', {}, [], ' to '),
      num(responseId, `interval_${arm}[1]`, interval[1]),
    ]),
  ]);
}

export function renderComparison(responseId: string, resp: ConditionalResponse): VNode {
  const e = resp.effect;
  const rows = [
    riskRow(responseId, 'start salvage now', 'treated', resp.risk_treated, resp.interval_treated),
    riskRow(responseId, 'defer salvage', 'untreated', resp.risk_untreated, resp.interval_untreated),
  ];
  const effectBits: VNode[] = [
    el('span', {}, [], `risk difference over ${e.dt} years: `),
    num(responseId, 'effect.point', e.point, 5, 'effect-point'),
  ];
  if (e.quantile_interval) {
    effectBits.push(
      el('span', {}, [], ' [draw 95%: '),
      num(responseId, 'effect.quantile_interval[0]', e.quantile_interval[0], 5),
      el('span', {}, [], ', '),
      num(responseId, 'effect.quantile_interval[1]', e.quantile_interval[1], 5),
      el('span', {}, [], ']'),
    );
  }
  if (e.normal_interval) {
    effectBits.push(
      el('span', {}, [], ' [variance 95%: '),
      num(responseId, 'effect.normal_interval[0]', e.normal_interval[0], 5),
      el('span', {}, [], ', '),
      num(responseId, 'effect.normal_interval[1]', e.normal_interval[1], 5),
      el('span', {}, [], ']'),
    );
  }
  return el('section', { class: 'comparison', 'data-response-id': responseId }, [
    el('table', { class: 'risks' }, [
      el('thead', {}, [
        el('tr', {}, [
          el('th', {}, [], 'scenario'),
          el('th', {}, [], `risk of metastasis by t+${e.dt}`),
          el('th', {}, [], '95% draw interval'),
        ]),
      ]),
      el('tbody', {}, rows),
    ]),
    el('p', { class: 'effect' }, effectBits),
    el('p', { class: 'seed' }, [
      el('span', {}, [], 'replay seed: '),
      num(responseId, 'seed', resp.seed, 0, 'seed-value'),
    ]),
  ]);
}

export function renderRiskCurves(
  responseIdsByDt: Array<{ dt: number; responseId: string; resp: ConditionalResponse }>,
): VNode {
  // paired risk points over the dt grid; plotting stays numeric markup so
  // every plotted value keeps its provenance attribute
  const points = responseIdsByDt.map(({ dt, responseId, resp }) =>
    el('li', { class: 'curve-point', 'data-dt': String(dt) }, [
      num(responseId, 'risk_treated', resp.risk_treated, 5, 'treated'),
      num(responseId, 'risk_untreated', resp.risk_untreated, 5, 'untreated'),
    ]),
  );
  return el('ol', { class: 'risk-curves' }, points);
}

export function renderCohortReference(responseId: string, resp: CohortResponse): VNode {
  const e = resp.effect;
  const bits: VNode[] = [
    el('span', {}, [], `cohort (${e.predicate ?? 'all'}, n=${e.n_r}): `),
    num(responseId, 'effect.point', e.point, 5, 'cohort-point'),
  ];
  if (e.normal_interval) {
    bits.push(
      el('span', {}, [], ' ['),
      num(responseId, 'effect.normal_interval[0]', e.normal_interval[0], 5),
      el('span', {}, [], ', '),
      num(responseId, 'effect.normal_interval[1]', e.normal_interval[1], 5),
      el('span', {}, [], ']'),
    );
  }
  return el('p', { class: 'cohort-reference', 'data-response-id': responseId }, bits);
}

/** Flatten a node tree into (data-source, data-value) provenance pairs. */
export function collectProvenance(node: VNode, out: Array<[string, number]> = []) {
  const src = node.attrs['data-source'];
  if (src !== undefined) out.push([src, Number(node.attrs['data-value'])]);
  for (const child of node.children) collectProvenance(child, out);
  return out;
}
