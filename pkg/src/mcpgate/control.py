"""Gateway process orchestration and the loopback control plane.

:class:`GatewayApp` owns one :class:`~mcpgate.core.GatewayCore` and the
transports attached to it.  One thread reads each connection; a single
dispatch lock serializes everything through the core, so pipeline
behavior stays identical to the synchronous unit-level picture.

The control plane is a loopback HTTP server for an approval console:

* ``GET /v1/pending``      consent requests awaiting a decision
* ``POST /v1/decision``    resolve one: ``{consent_id, allow, scope}``
* ``GET /v1/servers``      connection, attestation, and pin state
* ``GET /v1/events?from=N`` audit stream as server-sent events

Event ids are the gapless audit sequence numbers, so a console that
spots a gap can reconnect with ``from=<last seen>`` and miss nothing.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlparse

from .core import HOST, GatewayCore, PipelineResult
from .messages import (
    ERROR_PARSE,
    MalformedJson,
    ProtocolViolation,
    RpcMessage,
    parse_message,
)
from .policy import ConsentScope, DecisionConflict
from .transports import (
    BootstrapError,
    BootstrapResult,
    Transport,
    TransportClosed,
    TransportError,
    TransportTimeout,
    client_bootstrap,
)

SSE_KEEPALIVE_SECS = 15.0
SWEEP_INTERVAL_SECS = 1.0


class GatewayApp:
    """Threaded shell around a gateway core: transports in, verdicts out."""

    def __init__(self, core: GatewayCore):
        self.core = core
        self._lock = threading.RLock()
        self._host: Optional[Transport] = None
        self._host_thread: Optional[threading.Thread] = None
        self._server_transports: dict[str, Transport] = {}
        self._threads: list[threading.Thread] = []
        self._control: Optional[ThreadingHTTPServer] = None
        self._stopping = threading.Event()

    # ------------------------------------------------------------------
    # Connections

    def connect_server(self, server_id: str, transport: Transport,
                       timeout: float | None = 10.0,
                       expected_fingerprint: str | None = None) -> BootstrapResult:
        """Bootstrap a server connection and start pumping its frames.

        With ``expected_fingerprint`` set, a handshake that presents no
        certificate or a different one is torn down before anything is
        attached or pinned.
        """
        result = client_bootstrap(transport, timeout=timeout)
        if expected_fingerprint is not None:
            presented = result.cert.fingerprint() if result.cert else None
            if presented != expected_fingerprint:
                transport.close()
                raise BootstrapError(
                    f"{server_id}: certificate fingerprint mismatch "
                    f"(expected {expected_fingerprint}, got {presented})")
        with self._lock:
            self.core.attach_server(server_id, cert=result.cert,
                                    session_key=result.session_key)
            self._server_transports[server_id] = transport
        self._spawn(self._server_loop, server_id, transport)
        return result

    def attach_host(self, transport: Transport) -> None:
        self._host = transport
        self._host_thread = self._spawn(self._host_loop, transport)

    def join_host(self, timeout: float | None = None) -> None:
        """Block until the host connection closes."""
        if self._host_thread is not None:
            self._host_thread.join(timeout)

    def _spawn(self, target: Callable[..., None], *args: Any) -> threading.Thread:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads.append(thread)
        return thread

    # ------------------------------------------------------------------
    # Pump loops

    def _host_loop(self, transport: Transport) -> None:
        while not self._stopping.is_set():
            try:
                obj = transport.recv_obj(timeout=0.5)
            except TransportTimeout:
                continue
            except TransportClosed:
                return
            except TransportError:
                continue
            except MalformedJson:
                self._send_host_parse_error("malformed JSON from host")
                continue
            try:
                msg = parse_message(obj)
            except (MalformedJson, ProtocolViolation) as exc:
                self._send_host_parse_error(str(exc))
                continue
            with self._lock:
                result = self.core.process_host_message(msg)
                self._deliver(result)

    def _server_loop(self, server_id: str, transport: Transport) -> None:
        while not self._stopping.is_set():
            try:
                obj = transport.recv_obj(timeout=0.5)
            except TransportTimeout:
                continue
            except TransportClosed:
                with self._lock:
                    if server_id in self._server_transports:
                        self._server_transports.pop(server_id, None)
                        self.core.detach_server(server_id)
                return
            except (TransportError, MalformedJson):
                with self._lock:
                    self.core.audit.emit("malformed_frame", server_id=server_id)
                continue
            try:
                msg = parse_message(obj)
            except (MalformedJson, ProtocolViolation):
                with self._lock:
                    self.core.audit.emit("malformed_frame", server_id=server_id)
                continue
            with self._lock:
                result = self.core.process_server_message(server_id, msg)
                self._deliver(result)

    def _send_host_parse_error(self, detail: str) -> None:
        if self._host is None:
            return
        try:
            self._host.send_obj({
                "jsonrpc": "2.0",
                "id": None,
                "error": {"code": ERROR_PARSE, "message": "parse error",
                          "data": {"detail": detail}},
            })
        except TransportError:
            pass

    def _deliver(self, result: PipelineResult | None) -> None:
        if result is None:
            return
        for dest, msg in result.deliveries:
            self._send(dest, msg)

    def _send(self, dest: str, msg: RpcMessage) -> None:
        transport = self._host if dest == HOST else self._server_transports.get(dest)
        if transport is None:
            self.core.audit.emit("delivery_failed", dest=dest, reason="no_transport")
            return
        try:
            transport.send_obj(msg.to_obj())
        except TransportError:
            self.core.audit.emit("delivery_failed", dest=dest, reason="send_error")

    # ------------------------------------------------------------------
    # Consent plumbing

    def decide(self, consent_id: str, allow: bool,
               scope: ConsentScope = ConsentScope.ONCE) -> dict[str, Any]:
        """Apply an approval-console decision and release parked traffic."""
        with self._lock:
            if self.core.broker is None:
                return {"status": "error", "error": "no consent broker"}
            try:
                self.core.broker.decide(consent_id, allow=allow,
                                        now=self.core.clock(), scope=scope)
            except KeyError:
                return {"status": "unknown"}
            except DecisionConflict as exc:
                return {"status": "conflict", "error": str(exc)}
            result = self.core.resolve_consent(consent_id)
            self._deliver(result)
            return {
                "status": "applied",
                "consent_id": consent_id,
                "allow": allow,
                "scope": scope.value,
                "outcome": result.status if result is not None else "already_resolved",
            }

    def sweep_once(self) -> int:
        """Expire overdue consents; returns how many were denied."""
        with self._lock:
            expired = self.core.expire_consents()
            for result in expired:
                self._deliver(result)
            return len(expired)

    def start_sweeper(self, interval: float = SWEEP_INTERVAL_SECS) -> None:
        def loop() -> None:
            while not self._stopping.wait(interval):
                self.sweep_once()

        self._spawn(loop)

    # ------------------------------------------------------------------
    # Control plane

    def start_control(self, host: str = "127.0.0.1", port: int = 0) -> int:
        """Bind the control server; returns the bound port."""
        handler = _make_handler(self)
        self._control = ThreadingHTTPServer((host, port), handler)
        self._control.daemon_threads = True
        self._spawn(lambda: self._control.serve_forever(poll_interval=0.05))
        return self._control.server_address[1]

    @property
    def control_port(self) -> int | None:
        if self._control is None:
            return None
        return self._control.server_address[1]

    def shutdown(self) -> None:
        self._stopping.set()
        if self._control is not None:
            self._control.shutdown()
            self._control.server_close()
        for transport in [self._host, *self._server_transports.values()]:
            if transport is not None:
                try:
                    transport.close()
                except TransportError:
                    pass
        self.core.audit.close()


def _make_handler(app: GatewayApp) -> type:
    class ControlHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "mcpgate-control"

        def log_message(self, fmt: str, *args: Any) -> None:
            pass                          # control traffic is audited, not printed

        # ---- helpers

        def _json(self, status: int, body: dict[str, Any]) -> None:
            payload = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _read_body(self) -> dict[str, Any] | None:
            try:
                length = int(self.headers.get("Content-Length", "0"))
            except ValueError:
                return None
            if length <= 0 or length > 1 << 20:
                return None
            try:
                obj = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                return None
            return obj if isinstance(obj, dict) else None

        # ---- routes

        def do_GET(self) -> None:
            url = urlparse(self.path)
            if url.path == "/v1/pending":
                with app._lock:
                    pending = app.core.pending_consents()
                self._json(200, {"pending": pending})
            elif url.path == "/v1/servers":
                with app._lock:
                    servers = app.core.servers_snapshot()
                self._json(200, {"servers": servers})
            elif url.path == "/v1/events":
                self._stream_events(url)
            else:
                self._json(404, {"error": "not found"})

        def do_POST(self) -> None:
            url = urlparse(self.path)
            if url.path != "/v1/decision":
                self._json(404, {"error": "not found"})
                return
            body = self._read_body()
            if body is None:
                self._json(400, {"error": "body must be a JSON object"})
                return
            consent_id = body.get("consent_id")
            allow = body.get("allow")
            scope_raw = body.get("scope", "once")
            if not isinstance(consent_id, str) or not isinstance(allow, bool):
                self._json(400, {"error": "consent_id (string) and allow (bool) required"})
                return
            try:
                scope = ConsentScope(scope_raw)
            except ValueError:
                self._json(400, {"error": f"unknown scope {scope_raw!r}"})
                return
            outcome = app.decide(consent_id, allow, scope)
            status = {"applied": 200, "unknown": 404,
                      "conflict": 409}.get(outcome["status"], 500)
            self._json(status, outcome)

        def _stream_events(self, url) -> None:
            query = parse_qs(url.query)
            try:
                after = int(query.get("from", ["0"])[0])
            except ValueError:
                self._json(400, {"error": "from must be an integer"})
                return
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.end_headers()
            try:
                while not app._stopping.is_set():
                    events = app.core.audit.wait_for_events(after, timeout=SSE_KEEPALIVE_SECS)
                    if not events:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    for event in events:
                        after = event["seq"]
                        data = json.dumps(event)
                        chunk = f"id: {event['seq']}\nevent: {event['type']}\ndata: {data}\n\n"
                        self.wfile.write(chunk.encode("utf-8"))
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                return

    return ControlHandler
