/**
 * Thin service client. All numbers displayed by the UI come from these
 * responses; the client never computes an effect itself.
 */

import type {
  CohortRequest,
  CohortResponse,
  ConditionalRequest,
  ConditionalResponse,
  ModelInfo,
} from './types';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`service error ${status}`);
  }
}

export class WhatIfClient {
  private controller: AbortController | null = null;

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
  ) {}

  /**
   * Start a new what-if submission: cancels every request still in flight
   * from the previous one. Requests within a submission share the controller.
   */
  beginSubmission(): void {
    this.controller?.abort();
    this.controller = new AbortController();
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
      signal: this.controller?.signal,
    });
    const doc = await resp.json();
    if (!resp.ok) throw new ServiceError(resp.status, doc.detail ?? doc);
    return doc as T;
  }

  async modelInfo(): Promise<ModelInfo> {
    const resp = await this.fetchImpl(`${this.baseUrl}/model`);
    const doc = await resp.json();
    if (!resp.ok) throw new ServiceError(resp.status, doc.detail ?? doc);
    return doc as ModelInfo;
  }

  conditional(req: ConditionalRequest): Promise<ConditionalResponse> {
    return this.post<ConditionalResponse>('/effect/conditional', req);
  }

  cohort(req: CohortRequest): Promise<CohortResponse> {
    return this.post<CohortResponse>('/effect/cohort', req);
  }
}
