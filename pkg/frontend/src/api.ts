/** Typed client for the session service. All mutations carry the expected
 * revision; a 409 surfaces as ConflictError so callers can refetch. */

import type { CreateSessionRequest, Polarity, SessionPayload } from './types.js';

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class ConflictError extends ApiError {}

async function raise(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === 'string') detail = body.detail;
  } catch {
    /* non-JSON error body */
  }
  if (resp.status === 409) throw new ConflictError(409, detail);
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!resp.ok) await raise(resp);
    return (await resp.json()) as T;
  }

  createSession(body: CreateSessionRequest): Promise<SessionPayload> {
    return this.request('/sessions', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  getSession(sessionId: string): Promise<SessionPayload> {
    return this.request(`/sessions/${sessionId}`);
  }

  addClick(
    sessionId: string,
    imageId: string,
    row: number,
    col: number,
    polarity: Polarity,
    expectedRevision: number,
  ): Promise<SessionPayload> {
    return this.request(`/sessions/${sessionId}/clicks`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({
        image_id: imageId,
        row,
        col,
        polarity,
        expected_revision: expectedRevision,
      }),
    });
  }

  promote(sessionId: string, imageId: string, expectedRevision: number): Promise<SessionPayload> {
    return this.request(`/sessions/${sessionId}/promotions`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ image_id: imageId, expected_revision: expectedRevision }),
    });
  }

  /** Raw PNG bytes of one image's current mask. */
  async getMaskPng(sessionId: string, imageId: string): Promise<Uint8Array> {
    const resp = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/masks/${imageId}`);
    if (!resp.ok) await raise(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }
}
