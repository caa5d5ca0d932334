// @vitest-environment jsdom
//
// Full console round trip against an HTTP control API: render the
// pending card, hammer Deny, and check the gateway side observed
// exactly one decision with the denied audit trail.
import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { Controller } from "../src/controller.js";
import { render } from "../src/view.js";
import type { Roots } from "../src/view.js";
import { FakeGateway, serverRow } from "./fakegateway.js";

let gw: FakeGateway;
let controller: Controller | null = null;

function mount(): Roots {
  document.body.replaceChildren();
  const make = (id: string) => {
    const node = document.createElement("div");
    node.id = id;
    document.body.append(node);
    return node;
  };
  return {
    banner: make("banner"),
    pending: make("pending"),
    warnings: make("warnings"),
    servers: make("servers"),
    feed: make("feed"),
  };
}

async function bootConsole(): Promise<{ c: Controller; roots: Roots }> {
  const port = await gw.start();
  const c = new Controller(`http://127.0.0.1:${port}`, fetch, 20);
  controller = c;
  const roots = mount();
  const repaint = () =>
    render(
      document,
      roots,
      c.store.getState(),
      c.store.warnings(),
      Date.now() / 1000,
      {
        onDecision: (id, allow, scope) => void c.decide(id, allow, scope),
        onDismiss: (seq) => c.store.dismissFeedItem(seq),
        onDismissCard: (id) => c.store.removeCard(id),
      },
    );
  c.store.subscribe(repaint);
  await c.start(50);
  repaint();
  return { c, roots };
}

beforeEach(() => {
  gw = new FakeGateway();
  gw.servers = [serverRow({ server_id: "files" }), serverRow({ server_id: "web" })];
});

afterEach(async () => {
  controller?.stop();
  controller = null;
  await gw.stop();
});

describe("console round trip", () => {
  it("denies a cross-server flow from the card, exactly once, within 2 s", async () => {
    gw.addPending({
      consent_id: "flow-1",
      kind: "flow",
      cross_pairs: [["files", "web"]],
      method: "tools/call",
      server_id: "web",
      reason: "cross_server_flow",
    });
    const { roots } = await bootConsole();

    await vi.waitFor(() => {
      expect(roots.pending.querySelectorAll(".card")).toHaveLength(1);
    });
    const card = roots.pending.querySelector(".card") as HTMLElement;
    expect(card.dataset["consentId"]).toBe("flow-1");
    expect(card.querySelector(".card-route")?.textContent).toBe("files to web");

    const denyButton = card.querySelector("button.deny") as HTMLButtonElement;
    const clickedAt = Date.now();
    for (let i = 0; i < 10; i++) {
      denyButton.click();              // hammer
    }

    await vi.waitFor(
      () => {
        expect(roots.pending.querySelectorAll(".card")).toHaveLength(0);
      },
      { timeout: 2000 },
    );
    expect(Date.now() - clickedAt).toBeLessThan(2000);

    // exactly one decision call despite ten activations
    expect(gw.decisionCalls).toHaveLength(1);
    expect(gw.decisionCalls[0]).toEqual({
      consent_id: "flow-1",
      allow: false,
      scope: "once",
    });

    // the gateway audit log carries the denied flow decision
    const decided = gw.events.filter((e) => e.type === "consent_decided");
    expect(decided).toHaveLength(1);
    expect(decided[0]?.data).toMatchObject({
      consent_id: "flow-1",
      state: "denied",
    });

    // and the console's own feed shows it once the stream catches up
    await vi.waitFor(() => {
      const types = [...roots.feed.querySelectorAll(".feed-type")]
        .map((n) => n.textContent);
      expect(types).toContain("consent_decided");
    });
  });

  it("allow-session resolves a card and leaves an allowed trail", async () => {
    gw.addPending({
      consent_id: "flow-2",
      cross_pairs: [["files", "web"]],
      method: "resources/read",
    });
    const { roots } = await bootConsole();
    await vi.waitFor(() =>
      expect(roots.pending.querySelectorAll(".card")).toHaveLength(1),
    );
    (roots.pending.querySelector("button.allow-session") as HTMLButtonElement).click();
    await vi.waitFor(() =>
      expect(roots.pending.querySelectorAll(".card")).toHaveLength(0),
    );
    expect(gw.decisionCalls).toEqual([
      { consent_id: "flow-2", allow: true, scope: "session" },
    ]);
    expect(gw.decided.get("flow-2")).toBe("allowed");
  });

  it("elevated downgrade warnings reach the pane from the live stream", async () => {
    const { roots } = await bootConsole();
    gw.emit("warning", {
      server_id: "files",
      code: "downgrade_detected",
      elevated: true,
      detail: "server previously authenticated, now presents no credentials",
    });
    await vi.waitFor(() => {
      expect(roots.warnings.querySelector(".warning.elevated")).not.toBeNull();
    });
    expect(
      roots.warnings.querySelector(".warning-code")?.textContent,
    ).toBe("downgrade_detected");
  });
});
