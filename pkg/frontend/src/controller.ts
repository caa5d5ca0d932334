/** Wires the control client, the event feed, and the store together.
 *
 * A decision click is latched in the store before the request leaves,
 * so hammering a control issues at most one call.  Feed events keep
 * the pending list and server table fresh without polling; a polling
 * fallback covers the window where the stream is down.
 */

import { ControlClient } from "./api.js";
import { EventFeed } from "./sse.js";
import { Store } from "./store.js";
import type { AuditEvent, DecisionScope } from "./types.js";

const WINNING_STATE = /already (\w+)/;

export class Controller {
  readonly store = new Store();
  readonly client: ControlClient;
  readonly feed: EventFeed;
  private pollTimer: ReturnType<typeof setInterval> | null = null;

  constructor(
    base: string,
    fetchImpl: typeof fetch = fetch,
    backoffMs = 250,
  ) {
    this.client = new ControlClient(base, fetchImpl);
    this.feed = new EventFeed(
      base,
      {
        onEvent: (ev) => this.handleEvent(ev),
        onGap: (afterSeq) => this.store.markGap(afterSeq),
        onState: (state) => this.store.setConnection(state),
      },
      fetchImpl,
      backoffMs,
    );
  }

  async start(pollMs = 3000): Promise<void> {
    await this.refresh();
    this.feed.start(0);
    this.pollTimer = setInterval(() => {
      if (this.store.getState().connection === "reconnecting") {
        void this.refresh();
      }
    }, pollMs);
  }

  stop(): void {
    this.feed.stop();
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  async refresh(): Promise<void> {
    try {
      const [pending, servers] = await Promise.all([
        this.client.pending(),
        this.client.servers(),
      ]);
      this.store.setPending(pending);
      this.store.setServers(servers);
    } catch {
      this.store.setConnection("reconnecting");
    }
  }

  /** One activation, at most one decision call. */
  async decide(
    consentId: string,
    allow: boolean,
    scope: DecisionScope,
  ): Promise<void> {
    if (!this.store.latch(consentId)) {
      return;
    }
    let response;
    try {
      response = await this.client.decide(consentId, allow, scope);
    } catch {
      this.store.unlatch(consentId);
      this.store.setConnection("reconnecting");
      return;
    }
    switch (response.status) {
      case "applied":
      case "unknown":
        this.store.removeCard(consentId);
        break;
      case "conflict": {
        const match = WINNING_STATE.exec(response.error ?? "");
        this.store.markConflict(consentId, match?.[1] ?? "resolved");
        break;
      }
      default:
        this.store.unlatch(consentId);
    }
  }

  private handleEvent(ev: AuditEvent): void {
    this.store.appendEvent(ev);
    switch (ev.type) {
      case "consent_requested":
        void this.refreshPending();
        break;
      case "consent_decided": {
        const id = ev.data["consent_id"];
        if (typeof id === "string") {
          this.store.removeCard(id);
        }
        break;
      }
      case "server_attached":
      case "server_detached":
      case "message_forwarded":
      case "message_blocked":
        void this.refreshServers();
        break;
      default:
        break;
    }
  }

  private async refreshPending(): Promise<void> {
    try {
      this.store.setPending(await this.client.pending());
    } catch {
      // the poll fallback will retry
    }
  }

  private async refreshServers(): Promise<void> {
    try {
      this.store.setServers(await this.client.servers());
    } catch {
      // the poll fallback will retry
    }
  }
}
