/** Editor session controller: debounced slider edits with latest-wins
 * dispatch, independent full-quality commits, and 429 backoff.
 *
 * The controller owns no model logic; every number it displays originates
 * from server responses. Slider values are absolute; the server applies
 * additive deltas, so each request sends (target - acknowledged) for one
 * direction and at most one preview request is in flight per session.
 */

import { ApiClient, ApiError, RenderResponse } from "./api.js";

export interface ControllerOptions {
  debounceMs?: number;
  maxRetries?: number;
  retryBaseMs?: number;
}

export interface PreviewState {
  image: string | null;
  latencyMs: number | null;
  budgetId: string;
  stale: boolean;
  latentDigest: string | null;
}

export interface FinalState {
  image: string | null;
  latencyMs: number | null;
  consistency: number | null;
}

type Listener = () => void;

export class EditorController {
  readonly sliders = new Map<string, number>(); // UI target magnitudes
  private acked = new Map<string, number>(); // server-acknowledged sums
  budgetId = "full";
  sessionId: string | null = null;
  preview: PreviewState = { image: null, latencyMs: null, budgetId: "full", stale: false, latentDigest: null };
  final: FinalState = { image: null, latencyMs: null, consistency: null };
  lastError: string | null = null;

  private debounceMs: number;
  private maxRetries: number;
  private retryBaseMs: number;
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private seq = 0;
  private displayedSeq = 0;
  private listeners: Listener[] = [];

  constructor(private api: ApiClient, opts: ControllerOptions = {}) {
    this.debounceMs = opts.debounceMs ?? 80;
    this.maxRetries = opts.maxRetries ?? 3;
    this.retryBaseMs = opts.retryBaseMs ?? 250;
  }

  onChange(fn: Listener): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  attachSession(sessionId: string, budgetId: string): void {
    this.sessionId = sessionId;
    this.budgetId = budgetId;
    this.preview.budgetId = budgetId;
    this.sliders.clear();
    this.acked.clear();
  }

  /** Slider moved: record the target and debounce a preview request. */
  onSliderChange(direction: string, magnitude: number): void {
    this.sliders.set(direction, magnitude);
    this.scheduleFlush();
  }

  /** Preview-quality selector changed: re-render the preview at the new budget. */
  onBudgetChange(budgetId: string): void {
    this.budgetId = budgetId;
    this.scheduleFlush();
  }

  private scheduleFlush(): void {
    if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
    this.debounceTimer = setTimeout(() => {
      this.debounceTimer = null;
      void this.flush();
    }, this.debounceMs);
  }

  private dirtyDirection(): string | null {
    for (const [name, target] of this.sliders) {
      const acked = this.acked.get(name) ?? 0;
      if (target !== acked) return name;
    }
    return null;
  }

  private needsBudgetRefresh(): boolean {
    return this.preview.budgetId !== this.budgetId;
  }

  /** Issue at most one request; on completion, chase remaining dirt. */
  private async flush(): Promise<void> {
    if (this.inFlight || this.sessionId === null) return;
    const direction = this.dirtyDirection();
    if (direction === null && !this.needsBudgetRefresh()) return;
    this.inFlight = true;
    const seq = ++this.seq;
    try {
      let resp: RenderResponse;
      if (direction !== null) {
        const target = this.sliders.get(direction) ?? 0;
        const delta = target - (this.acked.get(direction) ?? 0);
        resp = await this.requestWithRetry(() =>
          this.api.edit(this.sessionId as string, direction, delta, this.budgetId),
        );
        this.acked.set(direction, (this.acked.get(direction) ?? 0) + delta);
      } else {
        resp = await this.requestWithRetry(() =>
          this.api.render(this.sessionId as string, this.budgetId),
        );
      }
      if (seq >= this.displayedSeq) {
        // superseded responses are discarded; with serialized requests this
        // only triggers if a newer handler already painted
        this.displayedSeq = seq;
        this.preview = {
          image: resp.image,
          latencyMs: resp.latency_ms,
          budgetId: resp.budget_id,
          stale: false,
          latentDigest: resp.latent_digest,
        };
        this.lastError = null;
      }
      this.inFlight = false;
      this.notify();
      // chase targets that moved while this request was in flight
      if (this.dirtyDirection() !== null || this.needsBudgetRefresh()) {
        void this.flush();
      }
    } catch (err) {
      this.inFlight = false;
      this.preview.stale = true;
      this.lastError = err instanceof Error ? err.message : String(err);
      this.notify();
      // keep the state dirty but pace retries through the debounce timer
      // instead of hammering the server in a microtask loop
      if (this.dirtyDirection() !== null || this.needsBudgetRefresh()) {
        this.scheduleFlush();
      }
    }
  }

  private async requestWithRetry(fn: () => Promise<RenderResponse>): Promise<RenderResponse> {
    let attempt = 0;
    for (;;) {
      try {
        return await fn();
      } catch (err) {
        if (err instanceof ApiError && err.status === 429 && attempt < this.maxRetries) {
          this.preview.stale = true;
          this.notify();
          await this.sleep(this.retryBaseMs * 2 ** attempt);
          attempt += 1;
          continue;
        }
        throw err;
      }
    }
  }

  private sleep(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
  }

  /** Commit: render the current latent at full budget, side by side. */
  async onCommit(): Promise<void> {
    if (this.sessionId === null) return;
    try {
      const resp = await this.api.render(this.sessionId, "full");
      this.final = {
        image: resp.image,
        latencyMs: resp.latency_ms,
        consistency: resp.consistency_vs_preview ?? null,
      };
      this.lastError = null;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
    }
    this.notify();
  }

  /** True while a slider target has not been acknowledged by the server. */
  get dirty(): boolean {
    return this.dirtyDirection() !== null;
  }
}
