import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { ApiClient, Transport } from "../src/api.js";
import { EditorController } from "../src/controller.js";

interface Recorded {
  method: string;
  path: string;
  body: unknown;
}

/** Mock server: records a transcript and plays scripted responses. */
class MockTransport implements Transport {
  transcript: Recorded[] = [];
  rejectWith429 = 0; // fail this many upcoming requests with 429
  private counter = 0;

  async request(method: string, path: string, body?: unknown) {
    this.transcript.push({ method, path, body });
    if (this.rejectWith429 > 0) {
      this.rejectWith429 -= 1;
      return { status: 429, json: { detail: "saturated" } };
    }
    this.counter += 1;
    if (path === "/budgets") {
      return {
        status: 200,
        json: {
          budgets: [
            { id: "0.25x-lowres", macs: 1, res_block: 3, ratios: [], latency_ms: 2 },
            { id: "full", macs: 100, res_block: 4, ratios: [], latency_ms: 20 },
          ],
        },
      };
    }
    if (path === "/directions") {
      return {
        status: 200,
        json: {
          directions: [
            { name: "smiling", vector: [1], magnitude_range: [-2, 2] },
            { name: "bright_background", vector: [1], magnitude_range: [-2, 2] },
          ],
        },
      };
    }
    const b = (body ?? {}) as Record<string, unknown>;
    return {
      status: 200,
      json: {
        image: `img-${this.counter}`,
        format: "png",
        latency_ms: 3.5,
        budget_id: (b.budget_id as string) ?? "full",
        latent_digest: `digest-${this.counter}`,
        consistency_vs_preview: 0.01,
      },
    };
  }

  editRequests(): Recorded[] {
    return this.transcript.filter((r) => r.path.endsWith("/edit"));
  }

  renderRequests(): Recorded[] {
    return this.transcript.filter((r) => r.path.endsWith("/render"));
  }
}

function makeController(opts = {}) {
  const transport = new MockTransport();
  const controller = new EditorController(new ApiClient(transport), {
    debounceMs: 80,
    retryBaseMs: 10,
    ...opts,
  });
  controller.attachSession("sess1", "0.25x-lowres");
  return { transport, controller };
}

async function drain() {
  // let chained promises settle between timer advances
  for (let i = 0; i < 10; i += 1) await Promise.resolve();
}

beforeEach(() => {
  vi.useFakeTimers();
});

afterEach(() => {
  vi.useRealTimers();
});

describe("debounced latest-wins preview requests", () => {
  it("a rapid drag issues at most one request per debounce window", async () => {
    const { transport, controller } = makeController();
    // 20 slider moves, 10ms apart: all inside successive debounce windows
    for (let i = 1; i <= 20; i += 1) {
      controller.onSliderChange("smiling", i / 10);
      await vi.advanceTimersByTimeAsync(10);
    }
    await vi.advanceTimersByTimeAsync(100);
    await drain();
    expect(transport.editRequests().length).toBe(1);
    const body = transport.editRequests()[0].body as Record<string, unknown>;
    expect(body.direction).toBe("smiling");
    expect(body.magnitude).toBeCloseTo(2.0); // final slider target, one delta
    expect(body.budget_id).toBe("0.25x-lowres");
  });

  it("displayed preview always reflects the latest acknowledged state", async () => {
    const { transport, controller } = makeController();
    controller.onSliderChange("smiling", 1.0);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    // new movement while previous response already painted
    controller.onSliderChange("smiling", 0.25);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const edits = transport.editRequests();
    expect(edits.length).toBe(2);
    const second = edits[1].body as Record<string, unknown>;
    expect(second.magnitude).toBeCloseTo(0.25 - 1.0); // delta vs acknowledged
    expect(controller.preview.image).toBe(
      `img-${transport.transcript.length}`,
    );
    expect(controller.dirty).toBe(false);
  });

  it("moves during an in-flight request coalesce into one follow-up", async () => {
    const { transport, controller } = makeController();
    controller.onSliderChange("smiling", 0.5);
    await vi.advanceTimersByTimeAsync(90);
    // while request 1 is in flight (promise resolution pending), user keeps moving
    controller.onSliderChange("smiling", 0.9);
    controller.onSliderChange("smiling", 1.3);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const edits = transport.editRequests();
    expect(edits.length).toBe(2);
    const deltas = edits.map((e) => (e.body as Record<string, number>).magnitude);
    expect(deltas[0]).toBeCloseTo(0.5);
    expect(deltas[1]).toBeCloseTo(0.8); // 1.3 - 0.5, latest wins
  });

  it("magnitude reset to 0 sends the exact inverse delta", async () => {
    const { transport, controller } = makeController();
    controller.onSliderChange("bright_background", 1.5);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    controller.onSliderChange("bright_background", 0);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const deltas = transport
      .editRequests()
      .map((e) => (e.body as Record<string, number>).magnitude);
    expect(deltas).toEqual([1.5, -1.5]);
    expect(deltas[0] + deltas[1]).toBe(0);
  });
});

describe("budget selection", () => {
  it("budget change triggers a preview refresh at the new budget", async () => {
    const { transport, controller } = makeController();
    controller.onSliderChange("smiling", 0.4);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    controller.onBudgetChange("full");
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const renders = transport.renderRequests();
    expect(renders.length).toBe(1);
    expect((renders[0].body as Record<string, unknown>).budget_id).toBe("full");
    expect(controller.preview.budgetId).toBe("full");
  });

  it("edits issued after a budget change carry the new budget", async () => {
    const { transport, controller } = makeController();
    controller.onBudgetChange("full");
    controller.onSliderChange("smiling", 0.7);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const body = transport.editRequests()[0].body as Record<string, unknown>;
    expect(body.budget_id).toBe("full");
  });
});

describe("commit", () => {
  it("commit issues a full-budget render and keeps the preview", async () => {
    const { transport, controller } = makeController();
    controller.onSliderChange("smiling", 1.0);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    const before = controller.preview.image;
    await controller.onCommit();
    const renders = transport.renderRequests();
    expect(renders.length).toBe(1);
    expect((renders[0].body as Record<string, unknown>).budget_id).toBe("full");
    expect(controller.final.image).not.toBeNull();
    expect(controller.final.consistency).toBeCloseTo(0.01);
    expect(controller.preview.image).toBe(before);
  });

  it("commit with no edits still renders at full", async () => {
    const { transport, controller } = makeController();
    await controller.onCommit();
    expect(transport.renderRequests().length).toBe(1);
    expect(transport.editRequests().length).toBe(0);
  });
});

describe("saturation handling", () => {
  it("429 responses retry with backoff and mark the preview stale", async () => {
    const { transport, controller } = makeController();
    transport.rejectWith429 = 2;
    controller.onSliderChange("smiling", 0.6);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    expect(controller.preview.stale).toBe(true);
    await vi.advanceTimersByTimeAsync(10); // first backoff
    await drain();
    await vi.advanceTimersByTimeAsync(20); // second backoff
    await drain();
    expect(transport.editRequests().length).toBe(3);
    expect(controller.preview.stale).toBe(false);
    expect(controller.lastError).toBeNull();
  });

  it("non-retryable errors surface without losing slider state", async () => {
    const { transport, controller } = makeController({ maxRetries: 0 });
    transport.rejectWith429 = 999;
    controller.onSliderChange("smiling", 0.9);
    await vi.advanceTimersByTimeAsync(90);
    await drain();
    expect(controller.lastError).not.toBeNull();
    expect(controller.sliders.get("smiling")).toBe(0.9);
    expect(controller.preview.stale).toBe(true);
  });
});
