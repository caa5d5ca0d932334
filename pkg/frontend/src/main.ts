/** Browser entry point: bind the controller to the page. */

import { Controller } from "./controller.js";
import { render } from "./view.js";
import type { Roots } from "./view.js";

function mustGet(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing #${id}`);
  }
  return node;
}

export function boot(base?: string): Controller {
  const target = base ?? `${location.protocol}//${location.host}`;
  const controller = new Controller(target);
  const roots: Roots = {
    banner: mustGet("banner"),
    pending: mustGet("pending"),
    warnings: mustGet("warnings"),
    servers: mustGet("servers"),
    feed: mustGet("feed"),
  };
  const handlers = {
    onDecision: (id: string, allow: boolean, scope: "once" | "session") => {
      void controller.decide(id, allow, scope);
    },
    onDismiss: (seq: number) => controller.store.dismissFeedItem(seq),
    onDismissCard: (id: string) => controller.store.removeCard(id),
  };
  const repaint = () =>
    render(
      document,
      roots,
      controller.store.getState(),
      controller.store.warnings(),
      Date.now() / 1000,
      handlers,
    );
  controller.store.subscribe(repaint);
  setInterval(repaint, 1000);          // keep ages ticking
  void controller.start();
  repaint();
  return controller;
}

if (typeof document !== "undefined" && document.getElementById("banner") !== null) {
  boot();
}
