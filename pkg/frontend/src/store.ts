/** Single serialized state store for the console.
 *
 * Every update, whether it came from a fetch, the event stream, or a
 * click, funnels through {@link Store.update}, so subscribers always
 * observe one consistent snapshot.  The store also owns the
 * exactly-one-decision latch: a card can be submitted once, and
 * repeated activations are ignored until the request resolves.
 */

import type {
  AuditEvent,
  ConnectionState,
  PendingEntry,
  ServerRow,
} from "./types.js";

export type CardPhase = "open" | "submitted" | "conflict";

export interface Card {
  entry: PendingEntry;
  phase: CardPhase;
  // set when the gateway reports someone else decided first
  winningState: string | null;
}

export interface FeedItem {
  kind: "event" | "gap";
  seq: number;                 // for gaps: last sequence seen before the hole
  event: AuditEvent | null;
  dismissed: boolean;
}

export interface ConsoleState {
  pending: Card[];
  servers: ServerRow[];
  feed: FeedItem[];
  connection: ConnectionState;
}

export class Store {
  private state: ConsoleState = {
    pending: [],
    servers: [],
    feed: [],
    connection: "reconnecting",
  };
  private listeners: Array<(s: ConsoleState) => void> = [];

  getState(): ConsoleState {
    return this.state;
  }

  subscribe(fn: (s: ConsoleState) => void): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((f) => f !== fn);
    };
  }

  update(fn: (s: ConsoleState) => ConsoleState): void {
    this.state = fn(this.state);
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  // ----------------------------------------------------------------
  // pending cards

  /** Replace the pending list from a fresh fetch, oldest first.
   *
   * Submitted and conflicted cards keep their local phase while the
   * gateway still lists them; cards the gateway no longer lists are
   * dropped unless they carry an unacknowledged conflict notice.
   */
  setPending(entries: PendingEntry[]): void {
    this.update((s) => {
      const previous = new Map(s.pending.map((c) => [c.entry.consent_id, c]));
      const next: Card[] = [...entries]
        .sort((a, b) => a.created_at - b.created_at)
        .map((entry) => {
          const old = previous.get(entry.consent_id);
          previous.delete(entry.consent_id);
          return old ? { ...old, entry } : { entry, phase: "open", winningState: null };
        });
      for (const leftover of previous.values()) {
        if (leftover.phase === "conflict") {
          next.push(leftover);
        }
      }
      return { ...s, pending: next };
    });
  }

  /** Try to latch a card for submission. Returns false when the card
   * is unknown or was already activated: the caller must not issue a
   * decision request in that case. */
  latch(consentId: string): boolean {
    let granted = false;
    this.update((s) => ({
      ...s,
      pending: s.pending.map((c) => {
        if (c.entry.consent_id !== consentId || c.phase !== "open") {
          return c;
        }
        granted = true;
        return { ...c, phase: "submitted" };
      }),
    }));
    return granted;
  }

  /** Decision round trip finished cleanly: the card leaves pending. */
  removeCard(consentId: string): void {
    this.update((s) => ({
      ...s,
      pending: s.pending.filter((c) => c.entry.consent_id !== consentId),
    }));
  }

  /** The gateway reported a different terminal decision already won. */
  markConflict(consentId: string, winningState: string): void {
    this.update((s) => ({
      ...s,
      pending: s.pending.map((c) =>
        c.entry.consent_id === consentId
          ? { ...c, phase: "conflict", winningState }
          : c,
      ),
    }));
  }

  /** The request failed before reaching a verdict; allow a retry. */
  unlatch(consentId: string): void {
    this.update((s) => ({
      ...s,
      pending: s.pending.map((c) =>
        c.entry.consent_id === consentId && c.phase === "submitted"
          ? { ...c, phase: "open" }
          : c,
      ),
    }));
  }

  // ----------------------------------------------------------------
  // servers and connection

  setServers(servers: ServerRow[]): void {
    this.update((s) => ({ ...s, servers }));
  }

  setConnection(connection: ConnectionState): void {
    if (this.state.connection === connection) {
      return;
    }
    this.update((s) => ({ ...s, connection }));
  }

  // ----------------------------------------------------------------
  // event feed

  /** Append an audit event. Sequence numbers must be strictly
   * increasing; anything at or below the last rendered seq is a
   * replay overlap and is dropped silently. */
  appendEvent(event: AuditEvent): void {
    const last = this.lastSeq();
    if (event.seq <= last) {
      return;
    }
    this.update((s) => ({
      ...s,
      feed: [...s.feed, { kind: "event", seq: event.seq, event, dismissed: false }],
    }));
  }

  /** Record that events between afterSeq and the next rendered event
   * were missed; never silently skipped. */
  markGap(afterSeq: number): void {
    const already = this.state.feed.some(
      (f) => f.kind === "gap" && f.seq === afterSeq,
    );
    if (already) {
      return;
    }
    this.update((s) => ({
      ...s,
      feed: [...s.feed, { kind: "gap", seq: afterSeq, event: null, dismissed: false }],
    }));
  }

  dismissFeedItem(seq: number): void {
    this.update((s) => ({
      ...s,
      feed: s.feed.map((f) => (f.seq === seq ? { ...f, dismissed: true } : f)),
    }));
  }

  lastSeq(): number {
    for (let i = this.state.feed.length - 1; i >= 0; i--) {
      const item = this.state.feed[i];
      if (item && item.kind === "event") {
        return item.seq;
      }
    }
    return 0;
  }

  /** Warning-kind events for the warnings pane, undismissed only. */
  warnings(): FeedItem[] {
    return this.state.feed.filter(
      (f) =>
        !f.dismissed &&
        (f.kind === "gap" || (f.event !== null && f.event.type === "warning")),
    );
  }
}

/** True when a warning entry should render elevated above the rest. */
export function isElevated(event: AuditEvent): boolean {
  return event.data["elevated"] === true || event.data["code"] === "downgrade_detected";
}
