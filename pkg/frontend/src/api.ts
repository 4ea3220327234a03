/** Typed client for the editing service's HTTP/JSON API. */

export interface BudgetInfo {
  id: string;
  macs: number;
  res_block: number;
  ratios: number[];
  latency_ms: number | null;
}

export interface DirectionInfo {
  name: string;
  vector: number[];
  magnitude_range: [number, number];
}

export interface SessionCreated {
  session_id: string;
  wplus_digest: string;
  recon_loss_full: number;
  recon_loss_preview: number;
}

export interface RenderResponse {
  image: string; // base64 PNG
  format: string;
  latency_ms: number;
  budget_id: string;
  latent_digest: string;
  consistency_vs_preview?: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

/** Transport abstraction so tests can record a transcript without a server. */
export interface Transport {
  request(method: string, path: string, body?: unknown): Promise<{ status: number; json: unknown }>;
}

export class FetchTransport implements Transport {
  constructor(private baseUrl: string) {}

  async request(method: string, path: string, body?: unknown) {
    const resp = await fetch(this.baseUrl + path, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    let json: unknown = null;
    try {
      json = await resp.json();
    } catch {
      json = null;
    }
    return { status: resp.status, json };
  }
}

function ok<T>(r: { status: number; json: unknown }): T {
  if (r.status >= 400) {
    const detail =
      r.json && typeof r.json === "object" && "detail" in (r.json as Record<string, unknown>)
        ? String((r.json as Record<string, unknown>).detail)
        : `HTTP ${r.status}`;
    throw new ApiError(r.status, detail);
  }
  return r.json as T;
}

export class ApiClient {
  constructor(private transport: Transport) {}

  async budgets(): Promise<BudgetInfo[]> {
    const r = await this.transport.request("GET", "/budgets");
    return ok<{ budgets: BudgetInfo[] }>(r).budgets;
  }

  async directions(): Promise<DirectionInfo[]> {
    const r = await this.transport.request("GET", "/directions");
    return ok<{ directions: DirectionInfo[] }>(r).directions;
  }

  async createSession(imageBase64: string, format: string): Promise<SessionCreated> {
    const r = await this.transport.request("POST", "/sessions", {
      image: imageBase64,
      format,
    });
    return ok<SessionCreated>(r);
  }

  async edit(
    sessionId: string,
    direction: string,
    magnitude: number,
    budgetId: string,
  ): Promise<RenderResponse> {
    const r = await this.transport.request("POST", `/sessions/${sessionId}/edit`, {
      direction,
      magnitude,
      budget_id: budgetId,
    });
    return ok<RenderResponse>(r);
  }

  async render(sessionId: string, budgetId: string): Promise<RenderResponse> {
    const r = await this.transport.request("POST", `/sessions/${sessionId}/render`, {
      budget_id: budgetId,
    });
    return ok<RenderResponse>(r);
  }
}
