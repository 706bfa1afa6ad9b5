/** Thin client over the editing service HTTP endpoints. */

import type { JobFinal, PointsPayload } from "./types.js";

export interface SessionView {
  id: string;
  image: { width: number; height: number };
  points: PointsPayload["points"];
  has_mask: boolean;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown
  ) {
    super(`HTTP ${status}: ${JSON.stringify(detail)}`);
  }
}

async function check(response: Response): Promise<Response> {
  if (!response.ok) {
    let detail: unknown = null;
    try {
      detail = await response.json();
    } catch {
      detail = await response.text().catch(() => null);
    }
    throw new ApiError(response.status, detail);
  }
  return response;
}

export class ServiceClient {
  constructor(private base: string = "") {}

  async createSession(image: Blob): Promise<SessionView> {
    const r = await check(
      await fetch(`${this.base}/sessions`, { method: "POST", body: image })
    );
    return r.json();
  }

  async putPoints(sessionId: string, payload: PointsPayload): Promise<SessionView> {
    const r = await check(
      await fetch(`${this.base}/sessions/${sessionId}/points`, {
        method: "PUT",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
      })
    );
    return r.json();
  }

  async putMask(sessionId: string, maskPng: Blob): Promise<SessionView> {
    const r = await check(
      await fetch(`${this.base}/sessions/${sessionId}/mask`, {
        method: "PUT",
        body: maskPng,
      })
    );
    return r.json();
  }

  async startEdit(
    sessionId: string,
    overrides: Record<string, unknown> = {}
  ): Promise<{ job_id: string }> {
    const r = await check(
      await fetch(`${this.base}/sessions/${sessionId}/edit`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(overrides),
      })
    );
    return r.json();
  }

  async cancel(jobId: string): Promise<void> {
    await check(await fetch(`${this.base}/jobs/${jobId}/cancel`, { method: "POST" }));
  }

  resultUrl(jobId: string): string {
    return `${this.base}/jobs/${jobId}/result`;
  }

  async getJob(jobId: string): Promise<JobFinal> {
    const r = await check(await fetch(`${this.base}/jobs/${jobId}`));
    return r.json();
  }

  /** Open the NDJSON progress stream as an async chunk iterable. */
  async openProgress(jobId: string): Promise<AsyncIterable<string>> {
    const response = await check(await fetch(`${this.base}/jobs/${jobId}/progress`));
    const reader = response.body!.getReader();
    const decoder = new TextDecoder();
    return {
      async *[Symbol.asyncIterator]() {
        for (;;) {
          const { done, value } = await reader.read();
          if (done) {
            return;
          }
          yield decoder.decode(value, { stream: true });
        }
      },
    };
  }
}
