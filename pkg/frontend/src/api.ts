// Typed client for the audit service. All model math happens server-side;
// this module only maps user actions 1:1 onto endpoints and de-duplicates
// identical in-flight requests.

export type Variant = "original" | "simplified" | "edited";

export interface EditOp {
  kind: "erase" | "desaturate" | "blur";
  rect: [number, number, number, number]; // y0, x0, height, width
  fill?: number;
  sigma?: number;
}

export interface PredictionEntry {
  variant: Variant;
  image_sha256: string;
  probs: number[];
  timestamp: number;
}

export interface SessionRecord {
  id: string;
  true_label: number | null;
  num_classes: number;
  source?: { kind: string; index?: number };
  predictions: PredictionEntry[];
  edits: EditOp[];
  simplify: { lambda_sim: number; steps: number; bpd_orig: number; bpd_sim: number } | null;
}

export interface EditResponse {
  probs: number[];
  edits: EditOp[];
  image_sha256: string;
}

export interface SimplifyStatus {
  status: "none" | "running" | "done" | "error";
  step?: number;
  error?: string | null;
}

export interface ApiError extends Error {
  code: string;
  status: number;
}

type SessionSource =
  | { kind: "misclassified" }
  | { kind: "test_index"; index: number }
  | { kind: "upload"; png_base64: string };

async function parseError(resp: Response): Promise<ApiError> {
  let code = "error";
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body: keep the status line
  }
  const err = new Error(message) as ApiError;
  err.code = code;
  err.status = resp.status;
  return err;
}

export class AuditApi {
  private inflight = new Map<string, Promise<unknown>>();

  constructor(private base: string = "") {}

  private async request<T>(key: string, path: string, init?: RequestInit): Promise<T> {
    const existing = this.inflight.get(key);
    if (existing) return existing as Promise<T>;
    const promise = (async () => {
      const resp = await fetch(this.base + path, {
        headers: { "content-type": "application/json" },
        ...init,
      });
      if (!resp.ok) throw await parseError(resp);
      return (await resp.json()) as T;
    })().finally(() => this.inflight.delete(key));
    this.inflight.set(key, promise);
    return promise;
  }

  createSession(source: SessionSource): Promise<SessionRecord> {
    return this.request(`create:${Math.random()}`, "/sessions", {
      method: "POST",
      body: JSON.stringify({ source }),
    });
  }

  getSession(id: string): Promise<SessionRecord> {
    return this.request(`get:${id}`, `/sessions/${id}`);
  }

  startSimplify(id: string, lambdaSim: number, steps: number): Promise<SimplifyStatus> {
    return this.request(`simplify:${id}`, `/sessions/${id}/simplify`, {
      method: "POST",
      body: JSON.stringify({ lambda_sim: lambdaSim, steps }),
    });
  }

  simplifyStatus(id: string): Promise<SimplifyStatus> {
    return this.request(`status:${id}`, `/sessions/${id}/simplify/status`);
  }

  applyEdit(id: string, op: EditOp): Promise<EditResponse> {
    return this.request(`edit:${id}:${JSON.stringify(op)}`, `/sessions/${id}/edits`, {
      method: "POST",
      body: JSON.stringify(op),
    });
  }

  undo(id: string): Promise<EditResponse> {
    return this.request(`undo:${id}:${Math.random()}`, `/sessions/${id}/undo`, {
      method: "POST",
    });
  }

  imageUrl(id: string, variant: Variant): string {
    // Cache-busted per call: the edited image changes under a stable URL.
    return `${this.base}/sessions/${id}/image?variant=${variant}&t=${Date.now()}`;
  }

  /** Poll simplify status until it leaves the running state. */
  async pollSimplify(
    id: string,
    onTick?: (status: SimplifyStatus) => void,
    intervalMs = 400,
  ): Promise<SimplifyStatus> {
    for (;;) {
      const status = await this.simplifyStatus(id);
      onTick?.(status);
      if (status.status === "done" || status.status === "error") return status;
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }

  /** Re-create a session from the same source and replay an edit stack. */
  async replay(source: SessionSource, edits: EditOp[]): Promise<string> {
    const fresh = await this.createSession(source);
    let lastHash = fresh.predictions[fresh.predictions.length - 1].image_sha256;
    for (const op of edits) {
      const resp = await this.applyEdit(fresh.id, op);
      lastHash = resp.image_sha256;
    }
    return lastHash;
  }
}
