/** DOM wiring: sliders per direction, budget selector, preview/final panes. */

import { ApiClient, BudgetInfo, DirectionInfo, FetchTransport } from "./api.js";
import { EditorController } from "./controller.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export async function mountEditor(root: HTMLElement, baseUrl: string): Promise<void> {
  const api = new ApiClient(new FetchTransport(baseUrl));
  const controller = new EditorController(api);

  const status = el("p", { class: "status" }, "upload an image to start");
  const fileInput = el("input", { type: "file", accept: "image/png" });
  const budgetSelect = el("select", { class: "budget" });
  const sliderBox = el("div", { class: "sliders" });
  const previewImg = el("img", { class: "preview", alt: "preview" });
  const previewLabel = el("p", {}, "preview");
  const finalImg = el("img", { class: "final", alt: "final render" });
  const finalLabel = el("p", {}, "final");
  const commitBtn = el("button", {}, "Commit full render");

  let budgets: BudgetInfo[] = [];
  let directions: DirectionInfo[] = [];
  try {
    [budgets, directions] = await Promise.all([api.budgets(), api.directions()]);
  } catch (e) {
    status.textContent = `service unavailable: ${e instanceof Error ? e.message : e}`;
  }

  for (const b of budgets) {
    const label = b.latency_ms !== null ? `${b.id} (~${b.latency_ms.toFixed(0)} ms preview)` : b.id;
    budgetSelect.appendChild(el("option", { value: b.id }, label));
  }
  if (budgets.length > 0) budgetSelect.value = budgets[0].id;

  for (const d of directions) {
    const [lo, hi] = d.magnitude_range;
    const row = el("div", { class: "slider-row" });
    row.appendChild(el("label", {}, d.name));
    const slider = el("input", {
      type: "range",
      min: String(lo),
      max: String(hi),
      step: String((hi - lo) / 200),
      value: "0",
    });
    slider.addEventListener("input", () => {
      controller.onSliderChange(d.name, Number(slider.value));
    });
    const reset = el("button", {}, "0");
    reset.addEventListener("click", () => {
      slider.value = "0";
      controller.onSliderChange(d.name, 0);
    });
    row.appendChild(slider);
    row.appendChild(reset);
    sliderBox.appendChild(row);
  }

  budgetSelect.addEventListener("change", () => controller.onBudgetChange(budgetSelect.value));
  commitBtn.addEventListener("click", () => void controller.onCommit());

  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    const bytes = new Uint8Array(await file.arrayBuffer());
    let binary = "";
    for (const b of bytes) binary += String.fromCharCode(b);
    status.textContent = "projecting...";
    try {
      const created = await api.createSession(btoa(binary), "png");
      controller.attachSession(created.session_id, budgetSelect.value || "full");
      status.textContent =
        `session ${created.session_id.slice(0, 8)} | ` +
        `recon full ${created.recon_loss_full.toFixed(4)}, ` +
        `preview ${created.recon_loss_preview.toFixed(4)}`;
      const first = await api.render(created.session_id, budgetSelect.value || "full");
      previewImg.src = `data:image/png;base64,${first.image}`;
    } catch (e) {
      status.textContent = `projection failed: ${e instanceof Error ? e.message : e}`;
    }
  });

  controller.onChange(() => {
    if (controller.preview.image !== null) {
      previewImg.src = `data:image/png;base64,${controller.preview.image}`;
      const ms = controller.preview.latencyMs;
      previewLabel.textContent =
        `preview @ ${controller.preview.budgetId}` +
        (ms !== null ? ` — ${ms.toFixed(1)} ms` : "") +
        (controller.preview.stale ? " (stale)" : "");
    }
    if (controller.final.image !== null) {
      finalImg.src = `data:image/png;base64,${controller.final.image}`;
      const parts = [`final — ${controller.final.latencyMs?.toFixed(1)} ms`];
      if (controller.final.consistency !== null) {
        parts.push(`consistency vs preview ${controller.final.consistency.toFixed(5)}`);
      }
      finalLabel.textContent = parts.join(" | ");
    }
    if (controller.lastError !== null) {
      status.textContent = `error: ${controller.lastError}`;
    }
  });

  const previewPane = el("div", { class: "pane" });
  previewPane.append(previewLabel, previewImg);
  const finalPane = el("div", { class: "pane" });
  finalPane.append(finalLabel, finalImg);
  const panes = el("div", { class: "panes" });
  panes.append(previewPane, finalPane);
  root.append(status, fileInput, budgetSelect, sliderBox, panes, commitBtn);
}
