// Workbench bootstrap: wires user actions to the service API and re-renders
// panes from each response.

import { AuditApi, EditOp, SessionRecord, Variant } from "./api";
import { SessionView, fromSessionRecord, withEditResponse, withSimplifyStatus } from "./state";
import {
  DISPLAY_SCALE,
  attachRectTool,
  buildEditOp,
  el,
  renderBars,
  renderEditStack,
  renderSimplifyStatus,
  renderUndoButton,
} from "./ui";

const api = new AuditApi("");
let view: SessionView | null = null;
let currentSource: { kind: "misclassified" } | { kind: "test_index"; index: number } = {
  kind: "misclassified",
};

function pane(variant: Variant, title: string): HTMLElement {
  const img = el("img", {
    id: `image-${variant}`,
    class: "pane-image",
    width: String(32 * DISPLAY_SCALE),
    height: String(32 * DISPLAY_SCALE),
    alt: title,
  });
  const bars = el("div", { id: `bars-${variant}`, class: "bars" });
  const wrap = el("div", { class: "pane" }, el("h3", {}, title));
  const holder = el("div", { class: "image-holder" }, img);
  if (variant === "edited") {
    const overlay = el("canvas", {
      id: "rect-overlay",
      width: String(32 * DISPLAY_SCALE),
      height: String(32 * DISPLAY_SCALE),
      class: "rect-overlay",
    });
    holder.append(overlay);
  }
  wrap.append(holder, bars);
  return wrap;
}

function refreshImages(): void {
  if (!view) return;
  for (const variant of ["original", "simplified", "edited"] as Variant[]) {
    const img = document.getElementById(`image-${variant}`) as HTMLImageElement | null;
    if (!img) continue;
    if (variant === "simplified" && view.simplify.status !== "done") continue;
    img.src = api.imageUrl(view.id, variant);
  }
}

function render(): void {
  if (!view) return;
  for (const variant of ["original", "simplified", "edited"] as Variant[]) {
    const bars = document.getElementById(`bars-${variant}`);
    if (bars) renderBars(bars, view, variant);
  }
  const stack = document.getElementById("edit-stack");
  if (stack) renderEditStack(stack, view);
  const undoBtn = document.getElementById("undo") as HTMLButtonElement;
  if (undoBtn) renderUndoButton(undoBtn, view);
  const status = document.getElementById("simplify-status");
  if (status) renderSimplifyStatus(status, view);
  const meta = document.getElementById("session-meta");
  if (meta) {
    meta.textContent = view.trueLabel === null
      ? `session ${view.id.slice(0, 8)}`
      : `session ${view.id.slice(0, 8)} | true class ${view.trueLabel}`;
  }
}

function showError(err: unknown): void {
  const box = document.getElementById("error-box");
  if (!box) return;
  box.textContent = err instanceof Error ? err.message : String(err);
  const retry = el("button", { id: "retry" }, "retry");
  retry.addEventListener("click", () => {
    box.textContent = "";
  });
  box.append(" ", retry);
}

async function newSession(source: typeof currentSource): Promise<void> {
  try {
    currentSource = source;
    const record: SessionRecord = await api.createSession(source);
    view = fromSessionRecord(record);
    refreshImages();
    render();
  } catch (err) {
    showError(err);
  }
}

async function runSimplify(): Promise<void> {
  if (!view) return;
  const lambda = Number((document.getElementById("lambda") as HTMLInputElement).value);
  const steps = Number((document.getElementById("steps") as HTMLInputElement).value);
  try {
    await api.startSimplify(view.id, lambda, steps);
    view = withSimplifyStatus(view, { status: "running", step: 0 });
    render();
    const final = await api.pollSimplify(view.id, (status) => {
      if (view) {
        view = withSimplifyStatus(view, status);
        render();
      }
    });
    if (final.status === "done") {
      const record = await api.getSession(view.id);
      view = fromSessionRecord(record);
      refreshImages();
    }
    render();
  } catch (err) {
    showError(err);
  }
}

async function submitEdit(rect: [number, number, number, number]): Promise<void> {
  if (!view) return;
  const kind = (document.getElementById("tool") as HTMLSelectElement).value as EditOp["kind"];
  const fill = Number((document.getElementById("fill") as HTMLInputElement).value);
  const sigma = Number((document.getElementById("sigma") as HTMLInputElement).value);
  try {
    const resp = await api.applyEdit(view.id, buildEditOp(kind, rect, fill, sigma));
    view = withEditResponse(view, resp);
    refreshImages();
    render();
  } catch (err) {
    showError(err);
  }
}

async function undoEdit(): Promise<void> {
  if (!view) return;
  try {
    const resp = await api.undo(view.id);
    view = withEditResponse(view, resp);
    refreshImages();
    render();
  } catch (err) {
    showError(err);
  }
}

export function mount(root: HTMLElement): void {
  const sampleBtn = el("button", { id: "sample" }, "Sample misclassified");
  const simplifyBtn = el("button", { id: "simplify" }, "Simplify");
  const undoBtn = el("button", { id: "undo", disabled: "true" }, "Undo");
  const controls = el(
    "div",
    { class: "controls" },
    sampleBtn,
    el("label", {}, "lambda ", el("input", { id: "lambda", type: "number", value: "1.0", step: "0.1" })),
    el("label", {}, "steps ", el("input", { id: "steps", type: "number", value: "60" })),
    simplifyBtn,
    el("span", { id: "simplify-status" }),
    el("label", {}, "tool ",
      (() => {
        const select = el("select", { id: "tool" });
        for (const kind of ["erase", "desaturate", "blur"]) {
          select.append(el("option", { value: kind }, kind));
        }
        return select;
      })()),
    el("label", {}, "fill ", el("input", { id: "fill", type: "number", value: "0.5", step: "0.1" })),
    el("label", {}, "sigma ", el("input", { id: "sigma", type: "number", value: "1.5", step: "0.5" })),
    undoBtn,
  );
  root.append(
    el("div", { id: "session-meta" }),
    el("div", { id: "error-box", class: "error" }),
    controls,
    el("div", { class: "panes" }, pane("original", "Original"), pane("simplified", "Simplified"), pane("edited", "Edited")),
    el("h4", {}, "Edit stack"),
    el("ol", { id: "edit-stack" }),
  );

  sampleBtn.addEventListener("click", () => void newSession({ kind: "misclassified" }));
  simplifyBtn.addEventListener("click", () => void runSimplify());
  undoBtn.addEventListener("click", () => void undoEdit());
  const overlay = document.getElementById("rect-overlay") as HTMLCanvasElement;
  attachRectTool(overlay, { onSelect: (rect) => void submitEdit(rect) });
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  mount(document.getElementById("app")!);
}
