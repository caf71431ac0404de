import { describe, expect, it } from "vitest";

import type { SessionRecord } from "../src/api";
import { argmax, barsFor, canUndo, fromSessionRecord, withEditResponse, withSimplifyStatus } from "../src/state";

const record: SessionRecord = {
  id: "s1",
  true_label: 2,
  num_classes: 4,
  predictions: [
    { variant: "original", image_sha256: "abc", probs: [0.1, 0.2, 0.6, 0.1], timestamp: 1 },
  ],
  edits: [],
  simplify: null,
};

describe("view projection", () => {
  it("mirrors the server record", () => {
    const view = fromSessionRecord(record);
    expect(view.id).toBe("s1");
    expect(view.probs.original?.imageSha256).toBe("abc");
    expect(barsFor(view, "simplified")).toBeNull();
    expect(canUndo(view)).toBe(false);
  });

  it("tags edited probabilities with the served image hash", () => {
    const view = fromSessionRecord(record);
    const next = withEditResponse(view, {
      probs: [0.4, 0.3, 0.2, 0.1],
      edits: [{ kind: "erase", rect: [0, 0, 2, 2], fill: 0.5 }],
      image_sha256: "def",
    });
    expect(next.probs.edited).toEqual({ imageSha256: "def", probs: [0.4, 0.3, 0.2, 0.1] });
    expect(canUndo(next)).toBe(true);
    // original projection untouched
    expect(next.probs.original?.imageSha256).toBe("abc");
    expect(view.probs.edited).toBeUndefined();
  });

  it("clears the edited pane when the stack empties", () => {
    const view = withEditResponse(fromSessionRecord(record), {
      probs: [0.4, 0.3, 0.2, 0.1],
      edits: [{ kind: "erase", rect: [0, 0, 2, 2] }],
      image_sha256: "def",
    });
    const reverted = withEditResponse(view, { probs: [0.1, 0.2, 0.6, 0.1], edits: [], image_sha256: "abc" });
    expect(canUndo(reverted)).toBe(false);
    expect(barsFor(reverted, "edited")).toBeNull();
    expect(reverted.probs.original?.probs).toEqual([0.1, 0.2, 0.6, 0.1]);
  });

  it("merges simplify status without touching probabilities", () => {
    const view = fromSessionRecord(record);
    const running = withSimplifyStatus(view, { status: "running", step: 7 });
    expect(running.simplify.step).toBe(7);
    expect(running.probs).toEqual(view.probs);
  });
});

describe("argmax", () => {
  it("returns the top class index", () => {
    expect(argmax([0.1, 0.5, 0.4])).toBe(1);
    expect(argmax([0.9])).toBe(0);
  });
});
