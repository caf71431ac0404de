// In-memory stand-in for the audit service implementing the documented API
// contract: prediction vectors and image hashes are pure deterministic
// functions of (source, edit stack), matching the real service's replay
// semantics, so undo/replay equality genuinely exercises the client.

import type { EditOp } from "../src/api";

interface MockSession {
  id: string;
  source: unknown;
  edits: EditOp[];
  simplifyTicks: number;
  simplifyDone: boolean;
}

function fnv(text: string): string {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h.toString(16).padStart(8, "0");
}

export function probsFromHash(hash: string, k = 10): number[] {
  const raw: number[] = [];
  let seed = parseInt(hash, 16) || 1;
  for (let i = 0; i < k; i++) {
    seed = (Math.imul(seed, 1103515245) + 12345) >>> 0;
    raw.push((seed % 1000) / 1000 + 0.01);
  }
  const total = raw.reduce((a, b) => a + b, 0);
  return raw.map((v) => v / total);
}

export class MockService {
  sessions = new Map<string, MockSession>();
  fetchLog: { method: string; path: string }[] = [];
  private counter = 0;

  imageHash(session: MockSession): string {
    return fnv(JSON.stringify({ source: session.source, edits: session.edits }));
  }

  private predictionEntry(session: MockSession, variant: string) {
    const hash = variant === "simplified" ? fnv(`sim:${this.imageHash(session)}`) : this.imageHash(session);
    return {
      variant,
      image_sha256: hash,
      probs: probsFromHash(hash),
      timestamp: Date.now() / 1000,
    };
  }

  private sessionRecord(session: MockSession) {
    const predictions = [this.predictionEntry({ ...session, edits: [] }, "original")];
    if (session.simplifyDone) predictions.push(this.predictionEntry(session, "simplified"));
    if (session.edits.length) predictions.push(this.predictionEntry(session, "edited"));
    return {
      id: session.id,
      true_label: 3,
      num_classes: 10,
      predictions,
      edits: session.edits,
      simplify: session.simplifyDone
        ? { lambda_sim: 1.0, steps: 5, bpd_orig: 4.2, bpd_sim: 2.9 }
        : null,
    };
  }

  handle(path: string, init?: RequestInit): { status: number; body: unknown } {
    const method = init?.method ?? "GET";
    this.fetchLog.push({ method, path: path.split("?")[0] });
    const payload = init?.body ? JSON.parse(init.body as string) : null;

    if (method === "POST" && path === "/sessions") {
      const id = `mock${this.counter++}`;
      const session: MockSession = {
        id, source: payload.source, edits: [], simplifyTicks: 0, simplifyDone: false,
      };
      this.sessions.set(id, session);
      return { status: 200, body: this.sessionRecord(session) };
    }

    const match = path.match(/^\/sessions\/([^/?]+)(\/.*)?/);
    if (!match) return { status: 404, body: { code: "not_found", message: "bad path" } };
    const session = this.sessions.get(match[1]);
    if (!session) return { status: 404, body: { code: "not_found", message: `no session ${match[1]}` } };
    const tail = (match[2] ?? "").split("?")[0];

    if (method === "GET" && tail === "") return { status: 200, body: this.sessionRecord(session) };
    if (method === "POST" && tail === "/simplify") {
      if (session.simplifyTicks > 0 && !session.simplifyDone) {
        return { status: 409, body: { code: "conflict", message: "simplify already running" } };
      }
      session.simplifyTicks = 1;
      session.simplifyDone = false;
      return { status: 200, body: { status: "running", step: 0 } };
    }
    if (method === "GET" && tail === "/simplify/status") {
      if (session.simplifyTicks === 0) return { status: 200, body: { status: "none" } };
      session.simplifyTicks++;
      if (session.simplifyTicks >= 3) {
        session.simplifyDone = true;
        return { status: 200, body: { status: "done", step: 5 } };
      }
      return { status: 200, body: { status: "running", step: session.simplifyTicks } };
    }
    if (method === "POST" && tail === "/edits") {
      const rect = payload.rect as number[];
      if (rect[0] + rect[2] > 32 || rect[1] + rect[3] > 32) {
        return { status: 400, body: { code: "validation", message: "rect out of bounds" } };
      }
      session.edits.push(payload as EditOp);
      const hash = this.imageHash(session);
      return { status: 200, body: { probs: probsFromHash(hash), edits: session.edits, image_sha256: hash } };
    }
    if (method === "POST" && tail === "/undo") {
      if (!session.edits.length) {
        return { status: 400, body: { code: "validation", message: "edit stack is empty" } };
      }
      session.edits.pop();
      const hash = this.imageHash(session);
      return { status: 200, body: { probs: probsFromHash(hash), edits: session.edits, image_sha256: hash } };
    }
    return { status: 404, body: { code: "not_found", message: `no route ${method} ${tail}` } };
  }
}

export function installMockFetch(mock: MockService): void {
  globalThis.fetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = typeof input === "string" ? input : input.toString();
    const { status, body } = mock.handle(url, init);
    return {
      ok: status >= 200 && status < 300,
      status,
      json: async () => body,
    } as Response;
  }) as typeof fetch;
}
