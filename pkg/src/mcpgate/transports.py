"""Frame transports and the session bootstrap exchange.

Transports move one JSON object per newline-delimited frame and know
nothing about gateway policy.  The bootstrap exchange rides on top as
the first two frames of a connection: the gateway offers an ephemeral
key, the server either answers with a signed ephemeral plus its
capability certificate or declares itself plain (no authenticated
channel, no attestation).
"""

from __future__ import annotations

import base64
import json
import queue
import subprocess
import sys
import threading
from dataclasses import dataclass
from typing import Any, BinaryIO, Optional, Sequence

from .attestation import CapabilityCert, CertMalformed, parse_certificate
from .channel import ClientHello, client_finish, client_hello, server_respond
from .messages import (
    MAX_FRAME_BYTES,
    FrameReader,
    FrameTooLarge,
    MalformedJson,
    StreamClosed,
    write_frame,
)

HANDSHAKE_KEY = "mcpsec_handshake"


class TransportError(Exception):
    pass


class TransportClosed(TransportError):
    pass


class TransportTimeout(TransportError):
    pass


class BootstrapError(TransportError):
    """The peer sent something other than a well-formed bootstrap frame."""


def _encode(obj: dict[str, Any]) -> bytes:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def _decode(frame: bytes) -> dict[str, Any]:
    try:
        obj = json.loads(frame.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(obj, dict):
        raise MalformedJson("frame is not a JSON object")
    return obj


class Transport:
    """One JSON object per frame, both directions."""

    def send_obj(self, obj: dict[str, Any]) -> None:
        raise NotImplementedError

    def recv_obj(self, timeout: float | None = None) -> dict[str, Any]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_CLOSED = object()


class QueueTransport(Transport):
    """In-process transport; frames cross a pair of thread-safe queues.

    Frames still round-trip through bytes so peers see exactly what a
    pipe would deliver.
    """

    def __init__(self, inbox: "queue.Queue[Any]", outbox: "queue.Queue[Any]"):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @staticmethod
    def pair() -> tuple["QueueTransport", "QueueTransport"]:
        a_to_b: queue.Queue[Any] = queue.Queue()
        b_to_a: queue.Queue[Any] = queue.Queue()
        return QueueTransport(b_to_a, a_to_b), QueueTransport(a_to_b, b_to_a)

    def send_obj(self, obj: dict[str, Any]) -> None:
        if self._closed:
            raise TransportClosed("transport closed")
        frame = _encode(obj)
        if len(frame) > MAX_FRAME_BYTES:
            raise FrameTooLarge(f"frame of {len(frame)} bytes exceeds {MAX_FRAME_BYTES}")
        self._outbox.put(frame)

    def recv_obj(self, timeout: float | None = None) -> dict[str, Any]:
        if self._closed:
            raise TransportClosed("transport closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)      # keep signalling for later readers
            raise TransportClosed("peer closed")
        return _decode(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)
            self._inbox.put(_CLOSED)      # wake local readers too


class StreamTransport(Transport):
    """Transport over a pair of binary streams (pipes, stdio).

    A reader thread pumps inbound frames into a queue so ``recv_obj``
    can honor timeouts even though the underlying read blocks.
    """

    def __init__(self, reader: BinaryIO, writer: BinaryIO,
                 max_frame_bytes: int = MAX_FRAME_BYTES):
        self._frames = FrameReader(reader, max_frame_bytes)
        self._writer = writer
        self._write_lock = threading.Lock()
        self._inbox: queue.Queue[Any] = queue.Queue()
        self._closed = False
        self._pump = threading.Thread(target=self._pump_loop, daemon=True)
        self._pump.start()

    def _pump_loop(self) -> None:
        while True:
            try:
                self._inbox.put(self._frames.read_frame())
            except FrameTooLarge as exc:
                self._inbox.put(exc)      # per-frame failure; stream continues
            except (StreamClosed, OSError, ValueError):
                self._inbox.put(_CLOSED)
                return

    def send_obj(self, obj: dict[str, Any]) -> None:
        if self._closed:
            raise TransportClosed("transport closed")
        frame = _encode(obj)
        with self._write_lock:
            try:
                write_frame(self._writer, frame)
            except (OSError, ValueError) as exc:
                raise TransportClosed(str(exc)) from exc

    def recv_obj(self, timeout: float | None = None) -> dict[str, Any]:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportClosed("end of stream")
        if isinstance(item, FrameTooLarge):
            raise item
        return _decode(item)

    def close(self) -> None:
        self._closed = True
        self._inbox.put(_CLOSED)
        try:
            self._writer.close()
        except OSError:
            pass


class SubprocessTransport(StreamTransport):
    """Spawns a server process and frames over its stdio."""

    def __init__(self, argv: Sequence[str], env: dict[str, str] | None = None):
        self.process = subprocess.Popen(
            list(argv),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=sys.stderr,
            env=env,
        )
        assert self.process.stdin is not None and self.process.stdout is not None
        super().__init__(self.process.stdout, self.process.stdin)

    def close(self) -> None:
        super().close()
        try:
            self.process.terminate()
            self.process.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self.process.kill()


def stdio_transport() -> StreamTransport:
    """The process's own stdio, as seen by a host that spawned us."""
    return StreamTransport(sys.stdin.buffer, sys.stdout.buffer)


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def _b64d(field: Any, name: str) -> bytes:
    if not isinstance(field, str):
        raise BootstrapError(f"{name} must be a base64 string")
    try:
        return base64.b64decode(field, validate=True)
    except (ValueError, TypeError) as exc:
        raise BootstrapError(f"{name} is not valid base64") from exc


@dataclass
class BootstrapResult:
    """What the gateway learned from a server's opening frame."""

    cert: Optional[CapabilityCert]
    session_key: Optional[bytes]

    @property
    def attested(self) -> bool:
        return self.session_key is not None


def client_bootstrap(transport: Transport, *, timeout: float | None = 10.0,
                     hello: ClientHello | None = None) -> BootstrapResult:
    """Gateway side: offer an ephemeral, read the server's answer.

    A ``plain`` answer yields no session; everything after it travels
    unauthenticated and the server is treated as unattested.
    """
    hello = hello or client_hello()
    transport.send_obj(
        {HANDSHAKE_KEY: {"phase": "hello", "client_public": _b64(hello.public)}}
    )
    reply = transport.recv_obj(timeout=timeout)
    body = reply.get(HANDSHAKE_KEY)
    if not isinstance(body, dict) or body.get("phase") != "respond":
        raise BootstrapError("expected a respond frame")
    if body.get("plain") is True:
        return BootstrapResult(cert=None, session_key=None)
    try:
        cert = parse_certificate({"capability_cert": body.get("capability_cert")})
    except CertMalformed as exc:
        raise BootstrapError(f"unusable certificate: {exc}") from exc
    response_public = _b64d(body.get("server_public"), "server_public")
    signature = _b64d(body.get("signature"), "signature")
    from .channel import ServerResponse

    key = client_finish(hello, ServerResponse(public=response_public,
                                              signature=signature), cert)
    return BootstrapResult(cert=cert, session_key=key)


def serve_bootstrap(transport: Transport, *, identity_key=None,
                    cert: CapabilityCert | None = None,
                    timeout: float | None = 10.0) -> Optional[bytes]:
    """Server side: answer the gateway's hello.

    With an identity key and certificate the answer is signed and a
    session key comes back; without them the answer is ``plain`` and
    the return value is ``None``.
    """
    first = transport.recv_obj(timeout=timeout)
    body = first.get(HANDSHAKE_KEY)
    if not isinstance(body, dict) or body.get("phase") != "hello":
        raise BootstrapError("expected a hello frame")
    client_public = _b64d(body.get("client_public"), "client_public")
    if identity_key is None or cert is None:
        transport.send_obj({HANDSHAKE_KEY: {"phase": "respond", "plain": True}})
        return None
    response, session_key = server_respond(
        client_public, identity_key, cert.fingerprint_bytes()
    )
    transport.send_obj({
        HANDSHAKE_KEY: {
            "phase": "respond",
            "server_public": _b64(response.public),
            "signature": _b64(response.signature),
            "capability_cert": cert.inner,
        }
    })
    return session_key
