import { beforeEach, describe, expect, it } from "vitest";

import { ApiError, AuditApi } from "../src/api";
import { MockService, installMockFetch } from "./mock_service";

let mock: MockService;
let api: AuditApi;

beforeEach(() => {
  mock = new MockService();
  installMockFetch(mock);
  api = new AuditApi("");
});

describe("endpoint mapping", () => {
  it("creates sessions via POST /sessions", async () => {
    const record = await api.createSession({ kind: "misclassified" });
    expect(record.id).toBeTruthy();
    expect(mock.fetchLog[0]).toEqual({ method: "POST", path: "/sessions" });
    expect(record.predictions[0].probs).toHaveLength(10);
  });

  it("maps edits and undo onto their endpoints", async () => {
    const record = await api.createSession({ kind: "test_index", index: 1 });
    await api.applyEdit(record.id, { kind: "erase", rect: [0, 0, 4, 4], fill: 0.5 });
    await api.undo(record.id);
    const paths = mock.fetchLog.map((e) => `${e.method} ${e.path}`);
    expect(paths).toContain(`POST /sessions/${record.id}/edits`);
    expect(paths).toContain(`POST /sessions/${record.id}/undo`);
  });

  it("surfaces server errors with their code and message", async () => {
    const record = await api.createSession({ kind: "misclassified" });
    let caught: ApiError | null = null;
    try {
      await api.applyEdit(record.id, { kind: "erase", rect: [30, 30, 10, 10] });
    } catch (err) {
      caught = err as ApiError;
    }
    expect(caught?.code).toBe("validation");
    expect(caught?.status).toBe(400);
    expect(caught?.message).toMatch(/out of bounds/);
  });

  it("rejects undo on an empty stack with the server's message", async () => {
    const record = await api.createSession({ kind: "misclassified" });
    await expect(api.undo(record.id)).rejects.toMatchObject({ code: "validation" });
  });
});

describe("in-flight de-duplication", () => {
  it("coalesces identical concurrent status requests", async () => {
    const record = await api.createSession({ kind: "misclassified" });
    const before = mock.fetchLog.length;
    await Promise.all([api.simplifyStatus(record.id), api.simplifyStatus(record.id)]);
    expect(mock.fetchLog.length - before).toBe(1);
  });
});

describe("polling", () => {
  it("polls simplify status until done", async () => {
    const record = await api.createSession({ kind: "misclassified" });
    await api.startSimplify(record.id, 1.0, 5);
    const ticks: string[] = [];
    const final = await api.pollSimplify(record.id, (s) => ticks.push(s.status), 1);
    expect(final.status).toBe("done");
    expect(ticks.length).toBeGreaterThan(1);
  });
});

describe("replay", () => {
  it("reproduces the edited image hash from source plus edit stack", async () => {
    const source = { kind: "test_index", index: 2 } as const;
    const record = await api.createSession(source);
    await api.applyEdit(record.id, { kind: "desaturate", rect: [0, 0, 16, 16] });
    const last = await api.applyEdit(record.id, { kind: "erase", rect: [8, 8, 8, 8], fill: 0.2 });
    const session = await api.getSession(record.id);
    const replayed = await api.replay(source, session.edits);
    expect(replayed).toBe(last.image_sha256);
  });
});
