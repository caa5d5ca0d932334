/** Server-sent-events consumer for /v1/events.
 *
 * Tracks the last rendered sequence number, surfaces holes instead of
 * skipping them, and resyncs a hole once by reconnecting with
 * ?from=<last seen> so the gateway can replay the missing range.  A
 * hole that survives its replay attempt is accepted as permanent; the
 * marker stays visible either way.  Connection loss flips the console
 * to Reconnecting and retries with bounded backoff.
 */

import type { AuditEvent, ConnectionState } from "./types.js";

export interface FeedCallbacks {
  onEvent(ev: AuditEvent): void;
  onGap(afterSeq: number): void;
  onState(state: ConnectionState): void;
}

const MAX_BACKOFF_MS = 2000;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class EventFeed {
  lastSeq = 0;
  private stopped = false;
  private controller: AbortController | null = null;
  private resyncedAt = -1;

  constructor(
    private readonly base: string,
    private readonly callbacks: FeedCallbacks,
    private readonly fetchImpl: typeof fetch = fetch,
    private readonly backoffMs: number = 250,
  ) {}

  start(fromSeq = 0): void {
    this.lastSeq = fromSeq;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    let delay = this.backoffMs;
    while (!this.stopped) {
      this.controller = new AbortController();
      let outcome: "resync" | "ended" = "ended";
      try {
        const res = await this.fetchImpl(
          `${this.base}/v1/events?from=${this.lastSeq}`,
          { signal: this.controller.signal },
        );
        if (!res.ok || res.body === null) {
          throw new Error(`events: HTTP ${res.status}`);
        }
        this.callbacks.onState("live");
        delay = this.backoffMs;
        outcome = await this.consume(res.body);
      } catch {
        // fall through to the reconnect path
      }
      if (this.stopped) {
        return;
      }
      if (outcome === "resync") {
        continue;                      // immediate replay, not an outage
      }
      this.callbacks.onState("reconnecting");
      await sleep(delay);
      delay = Math.min(delay * 2, MAX_BACKOFF_MS);
    }
  }

  private async consume(
    body: ReadableStream<Uint8Array>,
  ): Promise<"resync" | "ended"> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    try {
      for (;;) {
        const { done, value } = await reader.read();
        if (done) {
          return "ended";
        }
        buffer += decoder.decode(value, { stream: true });
        let split;
        while ((split = buffer.indexOf("\n\n")) >= 0) {
          const frame = buffer.slice(0, split);
          buffer = buffer.slice(split + 2);
          if (this.handleFrame(frame)) {
            return "resync";
          }
        }
      }
    } finally {
      await reader.cancel().catch(() => undefined);
    }
  }

  /** Returns true when the stream should be dropped to replay a hole. */
  private handleFrame(frame: string): boolean {
    let data = "";
    for (const line of frame.split("\n")) {
      if (line.startsWith("data:")) {
        data += line.slice(5).trim();
      }
    }
    if (data === "") {
      return false;                    // keepalive comment
    }
    let ev: AuditEvent;
    try {
      ev = JSON.parse(data) as AuditEvent;
    } catch {
      return false;
    }
    if (typeof ev.seq !== "number" || ev.seq <= this.lastSeq) {
      return false;                    // malformed, or replay overlap
    }
    if (this.lastSeq > 0 && ev.seq > this.lastSeq + 1) {
      this.callbacks.onGap(this.lastSeq);
      if (this.resyncedAt !== this.lastSeq) {
        this.resyncedAt = this.lastSeq;
        return true;
      }
      // replay did not fill the hole; keep going past it
    }
    this.lastSeq = ev.seq;
    this.callbacks.onEvent(ev);
    return false;
  }
}
