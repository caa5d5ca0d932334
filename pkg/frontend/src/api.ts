/** Thin typed client for the four control endpoints. */

import type {
  DecisionResponse,
  DecisionScope,
  PendingEntry,
  ServerRow,
} from "./types.js";

export class ControlClient {
  constructor(
    readonly base: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.base + path);
    if (!res.ok) {
      throw new Error(`${path}: HTTP ${res.status}`);
    }
    return (await res.json()) as T;
  }

  async pending(): Promise<PendingEntry[]> {
    const body = await this.getJson<{ pending: PendingEntry[] }>("/v1/pending");
    return body.pending;
  }

  async servers(): Promise<ServerRow[]> {
    const body = await this.getJson<{ servers: ServerRow[] }>("/v1/servers");
    return body.servers;
  }

  async decide(
    consentId: string,
    allow: boolean,
    scope: DecisionScope,
  ): Promise<DecisionResponse> {
    const res = await this.fetchImpl(this.base + "/v1/decision", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ consent_id: consentId, allow, scope }),
    });
    if (!res.ok) {
      throw new Error(`/v1/decision: HTTP ${res.status}`);
    }
    return (await res.json()) as DecisionResponse;
  }
}
