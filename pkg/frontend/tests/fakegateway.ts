/** In-process double of the gateway control API for tests.
 *
 * Serves the same four endpoints with the same wire shapes: pending
 * list, idempotent/conflicting decisions, server snapshot, and an SSE
 * event stream with ?from= replay.  Knobs exist to drop an event from
 * the live stream once (hole the replay can fill) or always
 * (permanent hole), and to ignore ?from= so clients see overlap.
 */

import http from "node:http";
import type { AddressInfo } from "node:net";
import type { AuditEvent, PendingEntry, ServerRow } from "../src/types.js";

interface DecisionCall {
  consent_id: string;
  allow: boolean;
  scope: string;
}

export class FakeGateway {
  events: AuditEvent[] = [];
  pending: PendingEntry[] = [];
  servers: ServerRow[] = [];
  decisionCalls: DecisionCall[] = [];
  decided = new Map<string, string>();
  dropOnce = new Set<number>();
  dropAlways = new Set<number>();
  ignoreFrom = false;
  failDecisions = false;
  private seq = 0;
  private stopping = false;
  private waiters: Array<() => void> = [];
  private server: http.Server | null = null;
  private sockets = new Set<import("node:net").Socket>();

  emit(type: string, data: Record<string, unknown>): AuditEvent {
    this.seq += 1;
    const event: AuditEvent = {
      seq: this.seq,
      ts: Date.now() / 1000,
      type,
      data,
    };
    this.events.push(event);
    const waiters = this.waiters;
    this.waiters = [];
    for (const wake of waiters) {
      wake();
    }
    return event;
  }

  addPending(entry: Partial<PendingEntry> & { consent_id: string }): PendingEntry {
    const full: PendingEntry = {
      kind: "flow",
      detail: {},
      cross_pairs: [],
      created_at: Date.now() / 1000,
      state: "pending",
      ...entry,
    };
    this.pending.push(full);
    this.emit("consent_requested", {
      consent_id: full.consent_id,
      kind: full.kind,
      server_id: full.server_id ?? null,
      method: full.method ?? null,
      cross_pairs: full.cross_pairs,
      reason: full.reason ?? "cross_server_flow",
    });
    return full;
  }

  start(): Promise<number> {
    this.server = http.createServer((req, res) => this.route(req, res));
    this.server.on("connection", (socket) => {
      this.sockets.add(socket);
      socket.on("close", () => this.sockets.delete(socket));
    });
    return new Promise((resolve) => {
      this.server?.listen(0, "127.0.0.1", () => {
        const addr = this.server?.address() as AddressInfo;
        resolve(addr.port);
      });
    });
  }

  stop(): Promise<void> {
    this.stopping = true;
    // swap before waking: woken pumps must not re-enter this loop
    const waiters = this.waiters;
    this.waiters = [];
    for (const wake of waiters) {
      wake();
    }
    for (const socket of this.sockets) {
      socket.destroy();
    }
    return new Promise((resolve) => {
      if (this.server === null) {
        resolve();
        return;
      }
      this.server.close(() => resolve());
    });
  }

  // ----------------------------------------------------------------

  private route(req: http.IncomingMessage, res: http.ServerResponse): void {
    const url = new URL(req.url ?? "/", "http://127.0.0.1");
    if (req.method === "GET" && url.pathname === "/v1/pending") {
      this.json(res, 200, { pending: this.pending });
    } else if (req.method === "GET" && url.pathname === "/v1/servers") {
      this.json(res, 200, { servers: this.servers });
    } else if (req.method === "GET" && url.pathname === "/v1/events") {
      this.stream(res, url);
    } else if (req.method === "POST" && url.pathname === "/v1/decision") {
      void this.decision(req, res);
    } else {
      this.json(res, 404, { error: "not found" });
    }
  }

  private json(res: http.ServerResponse, code: number, body: unknown): void {
    const text = JSON.stringify(body);
    res.writeHead(code, { "Content-Type": "application/json" });
    res.end(text);
  }

  private async decision(
    req: http.IncomingMessage,
    res: http.ServerResponse,
  ): Promise<void> {
    const chunks: Buffer[] = [];
    for await (const chunk of req) {
      chunks.push(chunk as Buffer);
    }
    const body = JSON.parse(Buffer.concat(chunks).toString("utf-8")) as {
      consent_id: string;
      allow: boolean;
      scope?: string;
    };
    this.decisionCalls.push({
      consent_id: body.consent_id,
      allow: body.allow,
      scope: body.scope ?? "once",
    });
    if (this.failDecisions) {
      this.json(res, 500, { error: "injected failure" });
      return;
    }
    const target = body.allow ? "allowed" : "denied";
    const existing = this.decided.get(body.consent_id);
    if (existing !== undefined) {
      if (existing === target) {
        this.json(res, 200, {
          status: "applied",
          consent_id: body.consent_id,
          allow: body.allow,
          scope: body.scope ?? "once",
          outcome: "already_resolved",
        });
      } else {
        this.json(res, 200, {
          status: "conflict",
          error: `consent ${body.consent_id} already ${existing}`,
        });
      }
      return;
    }
    const index = this.pending.findIndex(
      (p) => p.consent_id === body.consent_id,
    );
    if (index < 0) {
      this.json(res, 200, { status: "unknown" });
      return;
    }
    const entry = this.pending[index];
    this.pending.splice(index, 1);
    this.decided.set(body.consent_id, target);
    this.emit("consent_decided", {
      consent_id: body.consent_id,
      state: target,
      scope: body.scope ?? "once",
    });
    const outcome = body.allow ? "forwarded" : "blocked";
    if (!body.allow) {
      this.emit("message_blocked", {
        direction: "host_to_server",
        server_id: entry?.server_id ?? null,
        stage: "consent",
        reason: "consent_denied",
      });
    }
    this.json(res, 200, {
      status: "applied",
      consent_id: body.consent_id,
      allow: body.allow,
      scope: body.scope ?? "once",
      outcome,
    });
  }

  private stream(res: http.ServerResponse, url: URL): void {
    const fromRaw = url.searchParams.get("from") ?? "0";
    let cursor = this.ignoreFrom ? 0 : Number.parseInt(fromRaw, 10);
    res.writeHead(200, {
      "Content-Type": "text/event-stream",
      "Cache-Control": "no-cache",
    });
    let closed = false;
    res.on("close", () => {
      closed = true;
    });
    const pump = (): void => {
      if (closed) {
        return;
      }
      try {
        while (cursor < this.seq) {
          const event = this.events[cursor];
          cursor += 1;
          if (event === undefined) {
            continue;
          }
          if (this.dropAlways.has(event.seq)) {
            continue;
          }
          if (this.dropOnce.has(event.seq)) {
            this.dropOnce.delete(event.seq);
            continue;
          }
          const data = JSON.stringify(event);
          res.write(`id: ${event.seq}\nevent: ${event.type}\ndata: ${data}\n\n`);
        }
      } catch {
        closed = true;
        return;
      }
      if (!this.stopping) {
        this.waiters.push(pump);
      }
    };
    pump();
  }
}

export function serverRow(overrides: Partial<ServerRow>): ServerRow {
  return {
    server_id: "srv",
    attested: true,
    verdict: "valid",
    capabilities: ["resources"],
    fingerprint: "ab".repeat(32),
    pinned: { attested: true },
    session: true,
    counters: { forwarded_to: 0, forwarded_from: 0, blocked: 0 },
    ...overrides,
  };
}
