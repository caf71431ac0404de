// DOM rendering and the canvas rectangle tool. No model math here: panes
// render exactly what the server returned, and only the in-progress
// selection rectangle is drawn optimistically.

import type { EditOp, Variant } from "./api";
import { SessionView, barsFor, canUndo } from "./state";

export const DISPLAY_SCALE = 8; // 32px images shown at 256px
const IMAGE_SIZE = 32;

export interface RectSelection {
  y0: number;
  x0: number;
  height: number;
  width: number;
}

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (HTMLElement | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  for (const child of children) node.append(child);
  return node;
}

export function renderBars(container: HTMLElement, view: SessionView, variant: Variant): void {
  container.textContent = "";
  container.dataset.variant = variant;
  const tagged = barsFor(view, variant);
  if (!tagged) {
    container.dataset.imageHash = "";
    container.append(el("div", { class: "bars-empty" }, "no prediction yet"));
    return;
  }
  container.dataset.imageHash = tagged.imageSha256;
  tagged.probs.forEach((p, cls) => {
    const row = el("div", { class: "bar-row" });
    const label = el("span", { class: "bar-label" }, String(cls));
    const track = el("div", { class: "bar-track" });
    const fill = el("div", { class: "bar-fill" });
    fill.style.width = `${Math.round(p * 100)}%`;
    fill.dataset.prob = p.toFixed(6);
    if (view.trueLabel === cls) row.classList.add("true-class");
    track.append(fill);
    row.append(label, track, el("span", { class: "bar-value" }, p.toFixed(3)));
    container.append(row);
  });
}

export function renderEditStack(container: HTMLElement, view: SessionView): void {
  container.textContent = "";
  view.edits.forEach((op, i) => {
    const desc = `${i + 1}. ${op.kind} @ (${op.rect[1]},${op.rect[0]}) ${op.rect[3]}x${op.rect[2]}`;
    container.append(el("li", { class: "edit-entry" }, desc));
  });
}

export function renderUndoButton(button: HTMLButtonElement, view: SessionView): void {
  button.disabled = !canUndo(view);
}

export function renderSimplifyStatus(node: HTMLElement, view: SessionView): void {
  const s = view.simplify;
  if (s.status === "running") {
    node.textContent = `simplifying... step ${s.step ?? 0}`;
  } else if (s.status === "error") {
    node.textContent = `failed: ${s.error ?? "unknown error"}`;
  } else if (s.status === "done" && s.bpdOrig !== undefined) {
    node.textContent = `bits/dim ${s.bpdOrig.toFixed(2)} -> ${s.bpdSim?.toFixed(2)}`;
  } else {
    node.textContent = "";
  }
}

export function displayToImageRect(sel: RectSelection): [number, number, number, number] {
  const clamp = (v: number) => Math.max(0, Math.min(IMAGE_SIZE, Math.round(v / DISPLAY_SCALE)));
  const y0 = clamp(sel.y0);
  const x0 = clamp(sel.x0);
  const y1 = clamp(sel.y0 + sel.height);
  const x1 = clamp(sel.x0 + sel.width);
  return [Math.min(y0, y1), Math.min(x0, x1), Math.max(1, Math.abs(y1 - y0)), Math.max(1, Math.abs(x1 - x0))];
}

export interface RectToolHandlers {
  onSelect: (rect: [number, number, number, number]) => void;
}

/** Wire mousedown/move/up rectangle selection onto an overlay canvas. */
export function attachRectTool(canvas: HTMLCanvasElement, handlers: RectToolHandlers): void {
  let start: { x: number; y: number } | null = null;
  const ctx = canvas.getContext("2d");

  const draw = (x: number, y: number) => {
    if (!ctx || !start) return;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.strokeStyle = "#ff5252";
    ctx.lineWidth = 2;
    ctx.strokeRect(start.x, start.y, x - start.x, y - start.y);
  };

  canvas.addEventListener("mousedown", (ev) => {
    start = { x: ev.offsetX, y: ev.offsetY };
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (start) draw(ev.offsetX, ev.offsetY);
  });
  canvas.addEventListener("mouseup", (ev) => {
    if (!start) return;
    const sel: RectSelection = {
      y0: Math.min(start.y, ev.offsetY),
      x0: Math.min(start.x, ev.offsetX),
      height: Math.abs(ev.offsetY - start.y),
      width: Math.abs(ev.offsetX - start.x),
    };
    start = null;
    ctx?.clearRect(0, 0, canvas.width, canvas.height);
    if (sel.width >= 2 && sel.height >= 2) handlers.onSelect(displayToImageRect(sel));
  });
}

export function buildEditOp(
  kind: EditOp["kind"],
  rect: [number, number, number, number],
  fill: number,
  sigma: number,
): EditOp {
  const op: EditOp = { kind, rect };
  if (kind === "erase") op.fill = fill;
  if (kind === "blur") op.sigma = sigma;
  return op;
}
