// End-to-end workbench loop against a live audit service. Gated behind
// MINBITS_SERVICE_URL (e.g. http://127.0.0.1:8000) so the default suite has
// no Python dependency; tests/test_service.py covers the server side.

import { describe, expect, it } from "vitest";

import { AuditApi } from "../src/api";

const base = process.env.MINBITS_SERVICE_URL;

describe.skipIf(!base)("live service loop", () => {
  it("create -> simplify -> edit -> undo -> replay", async () => {
    const api = new AuditApi(base!);
    const record = await api.createSession({ kind: "misclassified" });
    expect(record.predictions[0].probs.length).toBe(record.num_classes);
    const sum = record.predictions[0].probs.reduce((a, b) => a + b, 0);
    expect(Math.abs(sum - 1)).toBeLessThan(1e-6);

    await api.startSimplify(record.id, 0.5, 4);
    const done = await api.pollSimplify(record.id, undefined, 300);
    expect(done.status).toBe("done");
    const session = await api.getSession(record.id);
    expect(session.simplify?.bpd_orig).toBeTypeOf("number");

    const before = record.predictions[0].probs;
    const edit = await api.applyEdit(record.id, { kind: "erase", rect: [4, 4, 12, 12], fill: 0.5 });
    expect(edit.probs).not.toEqual(before);
    const undone = await api.undo(record.id);
    undone.probs.forEach((p, i) => expect(p).toBeCloseTo(before[i], 6));

    const second = await api.applyEdit(record.id, { kind: "desaturate", rect: [0, 0, 16, 16] });
    const finalSession = await api.getSession(record.id);
    // The sampler resolves to a concrete test index, so the source is replayable.
    const replayed = await api.replay(finalSession.source as never, finalSession.edits);
    expect(replayed).toBe(second.image_sha256);
  }, 120000);
});
