/** DOM rendering, no framework.  Server-supplied strings only ever go
 * through textContent, never into markup. */

import { isElevated } from "./store.js";
import type { Card, ConsoleState, FeedItem } from "./store.js";
import type { DecisionScope } from "./types.js";

export interface Handlers {
  onDecision(consentId: string, allow: boolean, scope: DecisionScope): void;
  onDismiss(seq: number): void;
  onDismissCard(consentId: string): void;
}

export interface Roots {
  banner: HTMLElement;
  pending: HTMLElement;
  warnings: HTMLElement;
  servers: HTMLElement;
  feed: HTMLElement;
}

function el(
  doc: Document,
  tag: string,
  className: string,
  text?: string,
): HTMLElement {
  const node = doc.createElement(tag);
  node.className = className;
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function ageLabel(createdAt: number, now: number): string {
  const secs = Math.max(0, Math.round(now - createdAt));
  if (secs < 60) {
    return `${secs}s ago`;
  }
  return `${Math.floor(secs / 60)}m ${secs % 60}s ago`;
}

function describeCard(card: Card): string {
  const e = card.entry;
  const sources = e.cross_pairs.map(([from]) => from);
  const dests = e.cross_pairs.map(([, to]) => to);
  if (e.kind === "flow" && sources.length > 0) {
    return `data from ${[...new Set(sources)].join(", ")} would reach ` +
      `${[...new Set(dests)].join(", ")} via ${e.method ?? "a request"}`;
  }
  return `${e.server_id ?? "a server"} asks to ${e.method ?? "proceed"}` +
    (e.reason !== undefined ? ` (${e.reason})` : "");
}

function renderCard(
  doc: Document,
  card: Card,
  now: number,
  handlers: Handlers,
): HTMLElement {
  const e = card.entry;
  const root = el(doc, "article", `card phase-${card.phase}`);
  root.dataset["consentId"] = e.consent_id;

  const head = el(doc, "header", "card-head");
  head.append(
    el(doc, "span", "card-kind", e.kind),
    el(doc, "span", "card-route",
      e.cross_pairs.map((p) => p.join(" to ")).join("; ") ||
        (e.server_id ?? "")),
    el(doc, "span", "card-age", ageLabel(e.created_at, now)),
  );
  root.append(head);
  root.append(el(doc, "p", "card-summary", describeCard(card)));
  if (e.method !== undefined) {
    root.append(el(doc, "code", "card-method", e.method));
  }

  if (card.phase === "conflict") {
    const note = el(
      doc,
      "p",
      "card-conflict",
      `decided elsewhere: ${card.winningState ?? "resolved"}`,
    );
    const ack = el(doc, "button", "dismiss", "dismiss") as HTMLButtonElement;
    ack.addEventListener("click", () => handlers.onDismissCard(e.consent_id));
    note.append(ack);
    root.append(note);
    return root;
  }

  const controls = el(doc, "div", "card-controls");
  const buttons: Array<[string, string, boolean, DecisionScope]> = [
    ["allow-once", "Allow once", true, "once"],
    ["allow-session", "Allow session", true, "session"],
    ["deny", "Deny", false, "once"],
  ];
  for (const [cls, label, allow, scope] of buttons) {
    const button = el(doc, "button", cls, label) as HTMLButtonElement;
    button.disabled = card.phase !== "open";
    button.addEventListener("click", () =>
      handlers.onDecision(e.consent_id, allow, scope),
    );
    controls.append(button);
  }
  root.append(controls);
  if (card.phase === "submitted") {
    root.append(el(doc, "p", "card-wait", "applying decision"));
  }
  return root;
}

function renderWarningItem(
  doc: Document,
  item: FeedItem,
  handlers: Handlers,
): HTMLElement {
  if (item.kind === "gap") {
    return el(doc, "li", "warning gap", `events missed after #${item.seq}`);
  }
  const ev = item.event;
  if (ev === null) {
    return el(doc, "li", "warning");
  }
  const elevated = isElevated(ev);
  const node = el(doc, "li", elevated ? "warning elevated" : "warning");
  node.append(
    el(doc, "time", "warning-ts", new Date(ev.ts * 1000).toISOString()),
    el(doc, "span", "warning-code", String(ev.data["code"] ?? ev.type)),
    el(doc, "span", "warning-detail", String(ev.data["detail"] ?? "")),
  );
  if (ev.data["server_id"] !== undefined) {
    node.append(el(doc, "span", "warning-server", String(ev.data["server_id"])));
  }
  const dismiss = el(doc, "button", "dismiss", "dismiss") as HTMLButtonElement;
  dismiss.addEventListener("click", () => handlers.onDismiss(item.seq));
  node.append(dismiss);
  return node;
}

export function render(
  doc: Document,
  roots: Roots,
  state: ConsoleState,
  warnings: FeedItem[],
  now: number,
  handlers: Handlers,
): void {
  roots.banner.textContent =
    state.connection === "reconnecting" ? "Reconnecting to gateway" : "";
  roots.banner.className =
    state.connection === "reconnecting" ? "banner visible" : "banner";

  roots.pending.replaceChildren();
  if (state.pending.length === 0) {
    roots.pending.append(el(doc, "p", "empty", "no pending requests"));
  } else {
    for (const card of state.pending) {
      roots.pending.append(renderCard(doc, card, now, handlers));
    }
  }

  roots.warnings.replaceChildren();
  if (warnings.length === 0) {
    roots.warnings.append(el(doc, "p", "empty", "no warnings"));
  } else {
    const list = el(doc, "ul", "warning-list");
    for (const item of warnings) {
      list.append(renderWarningItem(doc, item, handlers));
    }
    roots.warnings.append(list);
  }

  roots.servers.replaceChildren();
  const table = el(doc, "table", "server-table");
  const head = el(doc, "tr", "");
  for (const col of ["server", "attested", "verdict", "pin", "traffic"]) {
    head.append(el(doc, "th", "", col));
  }
  table.append(head);
  for (const row of state.servers) {
    const tr = el(doc, "tr", row.attested ? "server ok" : "server plain");
    const pin = row.pinned === null
      ? "none"
      : row.pinned["attested"] === true ? "attested" : "plain";
    tr.append(
      el(doc, "td", "", row.server_id),
      el(doc, "td", "", row.attested ? "yes" : "no"),
      el(doc, "td", "", row.verdict ?? "none"),
      el(doc, "td", "", pin),
      el(doc, "td", "",
        `${row.counters.forwarded_to} out / ${row.counters.forwarded_from} in` +
          ` / ${row.counters.blocked} blocked`),
    );
    table.append(tr);
  }
  roots.servers.append(table);

  roots.feed.replaceChildren();
  const feed = el(doc, "ul", "feed-list");
  for (const item of state.feed.slice(-200)) {
    if (item.kind === "gap") {
      feed.append(el(doc, "li", "feed-gap", `events missed after #${item.seq}`));
    } else if (item.event !== null) {
      const li = el(doc, "li", "feed-item");
      li.append(
        el(doc, "span", "feed-seq", `#${item.event.seq}`),
        el(doc, "span", "feed-type", item.event.type),
      );
      feed.append(li);
    }
  }
  roots.feed.append(feed);
}
