/** Wire shapes of the gateway control API, as served on 127.0.0.1. */

export interface PendingEntry {
  consent_id: string;
  kind: string;                        // "flow" | "message"
  detail: Record<string, unknown>;
  cross_pairs: [string, string][];
  created_at: number;                  // unix seconds
  state: string;                       // "pending" once it reaches us
  // card-level fields the gateway hoists out of detail when present
  direction?: string;
  server_id?: string;
  method?: string;
  reason?: string;
}

export interface ServerRow {
  server_id: string;
  attested: boolean;
  verdict: string | null;
  capabilities: string[];
  fingerprint: string | null;
  pinned: Record<string, unknown> | null;
  session: boolean;
  counters: { forwarded_to: number; forwarded_from: number; blocked: number };
}

export interface AuditEvent {
  seq: number;
  ts: number;
  type: string;
  data: Record<string, unknown>;
}

export type DecisionScope = "once" | "session";

export interface DecisionResponse {
  status: "applied" | "conflict" | "unknown" | "error";
  consent_id?: string;
  allow?: boolean;
  scope?: string;
  outcome?: string;
  error?: string;
}

export type ConnectionState = "live" | "reconnecting";
