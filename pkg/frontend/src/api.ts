// Thin typed client over the /api/v1 service. All state lives on the
// server; the client never computes masks itself -- the confirmation
// mask is always fetched back from the server's rasterizer.

import type {
  AnnotationPayload,
  AnnotationReceipt,
  MetricRecord,
  NextRoundOverrides,
  ProjectInfo,
  RetrainStatus,
  RoundDoc,
  SampleInfo,
  SchemaDoc,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public reason: string) {
    super(`${status}: ${reason}`);
  }
}

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchImpl(this.base + path, init);
    if (!resp.ok) {
      let reason = resp.statusText;
      try {
        const doc = await resp.json();
        reason = doc?.detail?.error ?? JSON.stringify(doc);
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, reason);
    }
    return (await resp.json()) as T;
  }

  getProject(): Promise<ProjectInfo> {
    return this.request("GET", "/api/v1/project");
  }

  getSchema(): Promise<SchemaDoc> {
    return this.request("GET", "/api/v1/schema");
  }

  listSamples(): Promise<SampleInfo[]> {
    return this.request("GET", "/api/v1/samples");
  }

  listRounds(): Promise<RoundDoc[]> {
    return this.request("GET", "/api/v1/rounds");
  }

  getRound(roundId: number): Promise<RoundDoc> {
    return this.request("GET", `/api/v1/rounds/${roundId}`);
  }

  createRound(overrides?: NextRoundOverrides): Promise<RoundDoc> {
    return this.request("POST", "/api/v1/rounds", overrides);
  }

  accept(roundId: number, sampleId: number): Promise<RoundDoc> {
    return this.request("POST", `/api/v1/rounds/${roundId}/candidates/${sampleId}/accept`);
  }

  skip(roundId: number, sampleId: number): Promise<RoundDoc> {
    return this.request("POST", `/api/v1/rounds/${roundId}/candidates/${sampleId}/skip`);
  }

  submitAnnotation(payload: AnnotationPayload): Promise<AnnotationReceipt> {
    return this.request("POST", "/api/v1/annotations", payload);
  }

  retrain(): Promise<{ status: string }> {
    return this.request("POST", "/api/v1/retrain");
  }

  retrainStatus(): Promise<RetrainStatus> {
    return this.request("GET", "/api/v1/retrain/status");
  }

  metrics(): Promise<MetricRecord[]> {
    return this.request("GET", "/api/v1/metrics");
  }

  // image-bearing endpoints are consumed as <img>/canvas sources
  imageUrl(sampleId: number): string {
    return `${this.base}/api/v1/candidates/${sampleId}/image.png`;
  }

  predictionUrl(sampleId: number): string {
    return `${this.base}/api/v1/candidates/${sampleId}/prediction.png`;
  }

  uncertaintyUrl(sampleId: number): string {
    return `${this.base}/api/v1/candidates/${sampleId}/uncertainty.png`;
  }

  maskUrl(sampleId: number): string {
    return `${this.base}/api/v1/annotations/${sampleId}/mask.png`;
  }
}
