// View state: a pure projection of the most recent server responses.
// Probability bars are tagged with the hash of the image they were computed
// from, so a pane can never show probabilities for a stale image.

import type { EditOp, EditResponse, SessionRecord, SimplifyStatus, Variant } from "./api";

export interface TaggedProbs {
  imageSha256: string;
  probs: number[];
}

export interface SessionView {
  id: string;
  numClasses: number;
  trueLabel: number | null;
  probs: Partial<Record<Variant, TaggedProbs>>;
  edits: EditOp[];
  simplify: SimplifyStatus & { bpdOrig?: number; bpdSim?: number };
}

export function fromSessionRecord(record: SessionRecord): SessionView {
  const view: SessionView = {
    id: record.id,
    numClasses: record.num_classes,
    trueLabel: record.true_label,
    probs: {},
    edits: [...record.edits],
    simplify: { status: record.simplify ? "done" : "none" },
  };
  for (const entry of record.predictions) {
    view.probs[entry.variant] = { imageSha256: entry.image_sha256, probs: entry.probs };
  }
  if (record.simplify) {
    view.simplify.bpdOrig = record.simplify.bpd_orig;
    view.simplify.bpdSim = record.simplify.bpd_sim;
  }
  return view;
}

export function withEditResponse(view: SessionView, resp: EditResponse): SessionView {
  const variant: Variant = resp.edits.length > 0 ? "edited" : "original";
  return {
    ...view,
    edits: [...resp.edits],
    probs: {
      ...view.probs,
      [variant]: { imageSha256: resp.image_sha256, probs: resp.probs },
      ...(resp.edits.length === 0 ? { edited: undefined } : {}),
    },
  };
}

export function withSimplifyStatus(view: SessionView, status: SimplifyStatus): SessionView {
  return { ...view, simplify: { ...view.simplify, ...status } };
}

export function canUndo(view: SessionView): boolean {
  return view.edits.length > 0;
}

export function argmax(probs: number[]): number {
  let best = 0;
  for (let i = 1; i < probs.length; i++) if (probs[i] > probs[best]) best = i;
  return best;
}

/** Probabilities to display for a variant; null when none are available for
 * the currently served image (never falls back to another variant's bars). */
export function barsFor(view: SessionView, variant: Variant): TaggedProbs | null {
  const entry = view.probs[variant];
  return entry ?? null;
}
