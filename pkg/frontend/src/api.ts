import type { HealthResponse, PredictRequest, PredictResponse } from "./types.js";

/** Error carrying the server's detail message and status code. */
export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
    public readonly errorId?: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function throwApiError(res: Response): Promise<never> {
  let detail = `${res.status} ${res.statusText}`;
  let errorId: string | undefined;
  try {
    const body = await res.json();
    if (typeof body.detail === "string") detail = body.detail;
    if (typeof body.error_id === "string") errorId = body.error_id;
  } catch {
    /* non-JSON error body: keep the status line */
  }
  throw new ApiError(res.status, detail, errorId);
}

/** Thin typed client over the service's JSON API. */
export class ApiClient {
  constructor(public baseUrl: string = "") {}

  async health(): Promise<HealthResponse> {
    const res = await fetch(`${this.baseUrl}/health`);
    if (!res.ok) return throwApiError(res);
    return res.json();
  }

  /**
   * POST /predict. Returns both the parsed body and the exact response
   * text so an export can be byte-identical to what the server sent.
   */
  async predict(
    req: PredictRequest,
    signal?: AbortSignal,
  ): Promise<{ body: PredictResponse; rawText: string }> {
    const res = await fetch(`${this.baseUrl}/predict`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
      signal,
    });
    if (!res.ok) return throwApiError(res);
    const rawText = await res.text();
    return { body: JSON.parse(rawText) as PredictResponse, rawText };
  }
}
