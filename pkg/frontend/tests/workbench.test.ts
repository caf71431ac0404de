// Scripted workbench flow: create a session from the misclassification
// sampler, run simplify, apply an erase edit, undo, and verify that
// probability bars come only from server responses and that replaying the
// edit stack reproduces the served image hash.

import { beforeEach, describe, expect, it } from "vitest";

import { AuditApi } from "../src/api";
import { mount } from "../src/main";
import { MockService, installMockFetch } from "./mock_service";

let mock: MockService;

function barProbs(variant: string): number[] {
  const bars = document.getElementById(`bars-${variant}`);
  if (!bars) return [];
  return Array.from(bars.querySelectorAll<HTMLElement>(".bar-fill")).map((el) =>
    Number(el.dataset.prob),
  );
}

function barHash(variant: string): string {
  return (document.getElementById(`bars-${variant}`) as HTMLElement).dataset.imageHash ?? "";
}

async function until(cond: () => boolean, ms = 4000): Promise<void> {
  const deadline = Date.now() + ms;
  while (!cond()) {
    if (Date.now() > deadline) throw new Error("condition not reached");
    await new Promise((resolve) => setTimeout(resolve, 10));
  }
}

function mouse(type: string, x: number, y: number): MouseEvent {
  const ev = new MouseEvent(type, { bubbles: true });
  Object.defineProperty(ev, "offsetX", { value: x });
  Object.defineProperty(ev, "offsetY", { value: y });
  return ev;
}

function drawRect(x0: number, y0: number, x1: number, y1: number): void {
  const overlay = document.getElementById("rect-overlay") as HTMLCanvasElement;
  overlay.dispatchEvent(mouse("mousedown", x0, y0));
  overlay.dispatchEvent(mouse("mousemove", x1, y1));
  overlay.dispatchEvent(mouse("mouseup", x1, y1));
}

beforeEach(() => {
  mock = new MockService();
  installMockFetch(mock);
  document.body.innerHTML = '<div id="app"></div>';
  mount(document.getElementById("app")!);
});

describe("workbench loop", () => {
  it("runs sample -> simplify -> edit -> undo with server-driven bars and replayable hash", async () => {
    // 1. Sample a misclassified example.
    (document.getElementById("sample") as HTMLButtonElement).click();
    await until(() => barProbs("original").length === 10);
    const session = [...mock.sessions.values()][0];
    const servedOriginal = mock.handle(`/sessions/${session.id}`, undefined).body as {
      predictions: { variant: string; probs: number[] }[];
    };
    // (a) bars exactly mirror the server's probabilities
    expect(barProbs("original")).toEqual(
      servedOriginal.predictions.find((p) => p.variant === "original")!.probs.map((p) => Number(p.toFixed(6))),
    );
    const undoBtn = document.getElementById("undo") as HTMLButtonElement;
    expect(undoBtn.disabled).toBe(true);

    // 2. Simplify: spinner polls the status endpoint until done, then the pane fills.
    (document.getElementById("simplify") as HTMLButtonElement).click();
    await until(() => barProbs("simplified").length === 10, 8000);
    const statusCalls = mock.fetchLog.filter((e) => e.path.endsWith("/simplify/status"));
    expect(statusCalls.length).toBeGreaterThan(1);
    expect(document.getElementById("simplify-status")!.textContent).toMatch(/bits\/dim/);

    // 3. Draw an erase rectangle; bars re-render from the POST /edits response.
    const barsBeforeEdit = barProbs("original");
    drawRect(16, 16, 80, 80);
    await until(() => barProbs("edited").length === 10);
    expect(barProbs("original")).toEqual(barsBeforeEdit); // other panes untouched
    const editedProbsFirst = barProbs("edited");
    const editedHashFirst = barHash("edited");
    expect(undoBtn.disabled).toBe(false);

    // 4. Second edit, then undo: prediction returns to the exact prior state.
    drawRect(100, 100, 140, 140);
    await until(() => barHash("edited") !== editedHashFirst);
    undoBtn.click();
    await until(() => barHash("edited") === editedHashFirst);
    expect(barProbs("edited")).toEqual(editedProbsFirst); // (b) exact restoration

    // 5. Replay the serialized edit stack: hash matches the served image hash.
    const api = new AuditApi("");
    const current = await api.getSession(session.id);
    const replayed = await api.replay({ kind: "test_index", index: 0 } as never, current.edits);
    // Replay must equal a fresh application of the same stack to the same source.
    const replayedAgain = await api.replay({ kind: "test_index", index: 0 } as never, current.edits);
    expect(replayed).toBe(replayedAgain); // (c) replay determinism
    // and against the session's own source:
    const sameSource = await api.replay(session.source as never, current.edits);
    expect(sameSource).toBe(barHash("edited"));
  });

  it("keeps undo disabled when the stack empties again", async () => {
    (document.getElementById("sample") as HTMLButtonElement).click();
    await until(() => barProbs("original").length === 10);
    drawRect(16, 16, 60, 60);
    const undoBtn = document.getElementById("undo") as HTMLButtonElement;
    await until(() => !undoBtn.disabled);
    undoBtn.click();
    await until(() => undoBtn.disabled);
    expect(barHash("edited")).toBe("");
  });

  it("surfaces service errors with a retry affordance", async () => {
    (document.getElementById("sample") as HTMLButtonElement).click();
    await until(() => barProbs("original").length === 10);
    // Force a validation error by drawing outside the valid region via a
    // direct API call (the canvas tool clamps, so call the API directly).
    const api = new AuditApi("");
    const sid = [...mock.sessions.keys()][0];
    await expect(api.applyEdit(sid, { kind: "erase", rect: [31, 31, 10, 10] })).rejects.toMatchObject(
      { code: "validation" },
    );
  });
});
