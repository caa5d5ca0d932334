"""Message model for the gateway: JSON-RPC 2.0 parsing, the security
envelope, canonical serialization, and newline-delimited framing.

Every byte that crosses the gateway is parsed into an :class:`RpcMessage`
before any policy code sees it.  Serialization back to the wire goes
through :func:`canonical_json_bytes` so that two structurally equal
messages always produce identical bytes; the HMAC layer depends on this.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, BinaryIO

# Frames larger than this are rejected before JSON parsing is attempted.
MAX_FRAME_BYTES = 4 * 1024 * 1024

# JSON-RPC reserved codes.
ERROR_PARSE = -32700
ERROR_INVALID_REQUEST = -32600
ERROR_METHOD_NOT_FOUND = -32601

# Gateway-synthesized errors live in the implementation-defined -32000 range.
ERROR_BLOCKED_POLICY = -32000
ERROR_CAPABILITY_VIOLATION = -32001
ERROR_AUTH_FAILED = -32002
ERROR_ISOLATION_DENIED = -32003
ERROR_CONSENT_DENIED = -32004

ENVELOPE_KEY = "mcpsec"
ORIGIN_KEY = "mcpsec_origin"
ROUTE_KEY = "mcpsec_route"

NONCE_LEN = 32
HMAC_LEN = 32


class MessageError(Exception):
    """Base class for message-layer failures."""


class MalformedJson(MessageError):
    """The frame was not valid JSON."""


class ProtocolViolation(MessageError):
    """The frame was JSON but not a valid JSON-RPC 2.0 message."""


class NonCanonicalizable(MessageError):
    """The value contains something canonical JSON cannot represent."""


class FrameTooLarge(MessageError):
    """A single frame exceeded the configured size limit."""


class StreamClosed(MessageError):
    """The underlying stream reached EOF."""


class _Absent:
    """Sentinel distinguishing a missing member from a JSON null."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT: Any = _Absent()


class MessageKind(Enum):
    REQUEST = "request"
    RESPONSE = "response"
    NOTIFICATION = "notification"


class Direction(Enum):
    HOST_TO_SERVER = "host_to_server"
    SERVER_TO_HOST = "server_to_host"


class CapabilityClass(Enum):
    """Closed set of capability classes a certificate can attest."""

    RESOURCES = "resources"
    TOOLS = "tools"
    SAMPLING = "sampling"
    PROMPTS = "prompts"


@dataclass(frozen=True)
class MethodClassification:
    """What a method name implies about the capability it exercises.

    ``known`` is False for methods outside the built-in table; those are
    treated by policy as unknown rather than neutral.  ``capability`` is
    None for known lifecycle methods that need no capability at all.
    """

    known: bool
    capability: CapabilityClass | None


# Method table for the protocol revision the gateway targets.  Lifecycle
# and utility methods are known but capability-neutral.
_METHOD_TABLE: dict[str, CapabilityClass | None] = {
    "initialize": None,
    "notifications/initialized": None,
    "ping": None,
    "notifications/cancelled": None,
    "notifications/progress": None,
    "logging/setLevel": None,
    "notifications/message": None,
    "completion/complete": None,
    "roots/list": None,
    "notifications/roots/list_changed": None,
    "resources/list": CapabilityClass.RESOURCES,
    "resources/read": CapabilityClass.RESOURCES,
    "resources/templates/list": CapabilityClass.RESOURCES,
    "resources/subscribe": CapabilityClass.RESOURCES,
    "resources/unsubscribe": CapabilityClass.RESOURCES,
    "notifications/resources/list_changed": CapabilityClass.RESOURCES,
    "notifications/resources/updated": CapabilityClass.RESOURCES,
    "tools/list": CapabilityClass.TOOLS,
    "tools/call": CapabilityClass.TOOLS,
    "notifications/tools/list_changed": CapabilityClass.TOOLS,
    "prompts/list": CapabilityClass.PROMPTS,
    "prompts/get": CapabilityClass.PROMPTS,
    "notifications/prompts/list_changed": CapabilityClass.PROMPTS,
    "sampling/createMessage": CapabilityClass.SAMPLING,
}


def classify_method(method: str) -> MethodClassification:
    """Map a JSON-RPC method name onto the capability it exercises."""
    if method in _METHOD_TABLE:
        return MethodClassification(known=True, capability=_METHOD_TABLE[method])
    return MethodClassification(known=False, capability=None)


@dataclass
class RpcError:
    code: int
    message: str
    data: Any = ABSENT

    @classmethod
    def from_obj(cls, obj: Any) -> "RpcError":
        if not isinstance(obj, dict):
            raise ProtocolViolation("error member must be an object")
        if "code" not in obj or "message" not in obj:
            raise ProtocolViolation("error object needs code and message")
        code = obj["code"]
        message = obj["message"]
        if isinstance(code, bool) or not isinstance(code, int):
            raise ProtocolViolation("error code must be an integer")
        if not isinstance(message, str):
            raise ProtocolViolation("error message must be a string")
        extra = set(obj) - {"code", "message", "data"}
        if extra:
            raise ProtocolViolation(f"unexpected error members: {sorted(extra)}")
        return cls(code=code, message=message, data=obj.get("data", ABSENT))

    def to_obj(self) -> dict[str, Any]:
        obj: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.data is not ABSENT:
            obj["data"] = self.data
        return obj


class EnvelopeMalformed(MessageError):
    """The mcpsec member is present but structurally invalid.

    Carried on the message rather than raised out of the parser so the
    authentication layer can report it as a bad tag instead of dropping
    the frame before policy ever sees it.
    """


def _b64decode_strict(value: str, expected_len: int, what: str) -> bytes:
    try:
        raw = base64.b64decode(value, validate=True)
    except (ValueError, TypeError) as exc:
        raise EnvelopeMalformed(f"{what} is not valid base64") from exc
    if base64.b64encode(raw).decode("ascii") != value:
        # Non-canonical encodings would make the MAC input ambiguous.
        raise EnvelopeMalformed(f"{what} is not canonical base64")
    if len(raw) != expected_len:
        raise EnvelopeMalformed(f"{what} must decode to {expected_len} bytes")
    return raw


@dataclass
class McpSecEnvelope:
    """Per-message authentication envelope.

    Rides at the top level of the JSON-RPC object under the ``mcpsec``
    key.  The tag authenticates the canonical serialization of the whole
    message with the ``hmac`` field removed.
    """

    server_id: str
    timestamp: float
    nonce: bytes
    hmac: bytes

    @classmethod
    def from_obj(cls, obj: Any) -> "McpSecEnvelope":
        if not isinstance(obj, dict):
            raise EnvelopeMalformed("mcpsec must be an object")
        expected = {"server_id", "timestamp", "nonce", "hmac"}
        if set(obj) != expected:
            raise EnvelopeMalformed("mcpsec must have exactly server_id, timestamp, nonce, hmac")
        server_id = obj["server_id"]
        timestamp = obj["timestamp"]
        if not isinstance(server_id, str) or not server_id:
            raise EnvelopeMalformed("server_id must be a non-empty string")
        if isinstance(timestamp, bool) or not isinstance(timestamp, (int, float)):
            raise EnvelopeMalformed("timestamp must be a number")
        if isinstance(timestamp, float) and not math.isfinite(timestamp):
            raise EnvelopeMalformed("timestamp must be finite")
        nonce = _b64decode_strict(obj["nonce"], NONCE_LEN, "nonce")
        tag = _b64decode_strict(obj["hmac"], HMAC_LEN, "hmac")
        return cls(server_id=server_id, timestamp=timestamp, nonce=nonce, hmac=tag)

    def to_obj(self, exclude_hmac: bool = False) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "server_id": self.server_id,
            "timestamp": self.timestamp,
            "nonce": base64.b64encode(self.nonce).decode("ascii"),
        }
        if not exclude_hmac:
            obj["hmac"] = base64.b64encode(self.hmac).decode("ascii")
        return obj


# Members of the top-level JSON-RPC object that map onto structured
# fields; anything else is preserved verbatim in ``extra``.
_CORE_MEMBERS = {"jsonrpc", "id", "method", "params", "result", "error", ENVELOPE_KEY}


@dataclass
class RpcMessage:
    """A parsed JSON-RPC 2.0 message plus its security envelope.

    ``id`` uses ABSENT for "no id member" because JSON null is a legal id
    on responses; kind classification keys off member presence.
    """

    kind: MessageKind
    id: Any = ABSENT
    method: str | None = None
    params: Any = ABSENT
    result: Any = ABSENT
    error: RpcError | None = None
    envelope: McpSecEnvelope | None = None
    # Wire form of the mcpsec member when it failed structural parsing;
    # ABSENT when no mcpsec member was present at all.
    envelope_raw: Any = ABSENT
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def has_envelope(self) -> bool:
        return self.envelope is not None or self.envelope_raw is not ABSENT

    @property
    def envelope_malformed(self) -> bool:
        return self.envelope is None and self.envelope_raw is not ABSENT

    def to_obj(self, exclude_hmac: bool = False, include_envelope: bool = True) -> dict[str, Any]:
        obj: dict[str, Any] = {"jsonrpc": "2.0"}
        if self.method is not None:
            obj["method"] = self.method
        if self.params is not ABSENT:
            obj["params"] = self.params
        if self.id is not ABSENT:
            obj["id"] = self.id
        if self.result is not ABSENT:
            obj["result"] = self.result
        if self.error is not None:
            obj["error"] = self.error.to_obj()
        for key, value in self.extra.items():
            obj[key] = value
        if include_envelope:
            if self.envelope is not None:
                obj[ENVELOPE_KEY] = self.envelope.to_obj(exclude_hmac=exclude_hmac)
            elif self.envelope_raw is not ABSENT:
                raw = self.envelope_raw
                if exclude_hmac and isinstance(raw, dict):
                    raw = {k: v for k, v in raw.items() if k != "hmac"}
                obj[ENVELOPE_KEY] = raw
        return obj


def parse_message(frame: bytes | str | dict[str, Any]) -> RpcMessage:
    """Parse one frame into an :class:`RpcMessage`.

    Raises :class:`MalformedJson` for byte-level garbage and
    :class:`ProtocolViolation` for JSON that is not a JSON-RPC 2.0
    request, response or notification.  A structurally broken security
    envelope does not raise; it is carried through so the channel layer
    can fail it as a bad tag.
    """
    if isinstance(frame, (bytes, bytearray, str)):
        try:
            obj = json.loads(frame)
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedJson(str(exc)) from exc
    else:
        obj = frame
    if not isinstance(obj, dict):
        raise ProtocolViolation("top-level value must be an object")
    if obj.get("jsonrpc") != "2.0":
        raise ProtocolViolation('jsonrpc member must be "2.0"')

    has_method = "method" in obj
    has_id = "id" in obj
    has_result = "result" in obj
    has_error = "error" in obj

    method = obj.get("method")
    if has_method and not isinstance(method, str):
        raise ProtocolViolation("method must be a string")
    msg_id = obj.get("id", ABSENT)
    if has_id and not (msg_id is None or isinstance(msg_id, (str, int, float))):
        raise ProtocolViolation("id must be a string, number or null")
    params = obj.get("params", ABSENT)
    if params is not ABSENT and not isinstance(params, (dict, list)):
        raise ProtocolViolation("params must be an object or array")

    if has_method:
        if has_result or has_error:
            raise ProtocolViolation("method and result/error cannot coexist")
        kind = MessageKind.REQUEST if has_id else MessageKind.NOTIFICATION
        result: Any = ABSENT
        error = None
    else:
        if not has_id:
            raise ProtocolViolation("response must carry an id")
        if has_result == has_error:
            raise ProtocolViolation("response needs exactly one of result, error")
        kind = MessageKind.RESPONSE
        result = obj.get("result", ABSENT)
        error = RpcError.from_obj(obj["error"]) if has_error else None

    envelope: McpSecEnvelope | None = None
    envelope_raw: Any = ABSENT
    if ENVELOPE_KEY in obj:
        try:
            envelope = McpSecEnvelope.from_obj(obj[ENVELOPE_KEY])
        except EnvelopeMalformed:
            envelope_raw = obj[ENVELOPE_KEY]

    extra = {k: v for k, v in obj.items() if k not in _CORE_MEMBERS}
    return RpcMessage(
        kind=kind,
        id=msg_id,
        method=method if has_method else None,
        params=params,
        result=result,
        error=error,
        envelope=envelope,
        envelope_raw=envelope_raw,
        extra=extra,
    )


def _check_canonicalizable(value: Any, path: str = "$") -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise NonCanonicalizable(f"non-finite number at {path}")
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check_canonicalizable(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise NonCanonicalizable(f"non-string key at {path}")
            _check_canonicalizable(item, f"{path}.{key}")
        return
    raise NonCanonicalizable(f"unsupported type {type(value).__name__} at {path}")


def canonical_json_bytes(value: Any) -> bytes:
    """Serialize a JSON value deterministically.

    Keys are sorted by UTF-8 byte order (identical to code-point order),
    separators are minimal, non-ASCII passes through unescaped, and
    floats take their shortest round-trip form.  Two structurally equal
    values always yield the same bytes, which is what the MAC layer and
    the certificate signatures rely on.
    """
    _check_canonicalizable(value)
    try:
        return json.dumps(
            value,
            ensure_ascii=False,
            sort_keys=True,
            separators=(",", ":"),
            allow_nan=False,
        ).encode("utf-8")
    except (ValueError, UnicodeEncodeError) as exc:
        # Unpaired surrogates survive dumps but cannot encode to UTF-8.
        raise NonCanonicalizable(str(exc)) from exc


def serialize_canonical(msg: RpcMessage, exclude_hmac: bool = False) -> bytes:
    """Canonical wire bytes for a message.

    With ``exclude_hmac`` the envelope's hmac field is dropped; the
    result is exactly the byte string the tag is computed over.
    """
    return canonical_json_bytes(msg.to_obj(exclude_hmac=exclude_hmac))


def make_request(
    method: str,
    params: Any = ABSENT,
    msg_id: Any = ABSENT,
    envelope: McpSecEnvelope | None = None,
) -> RpcMessage:
    if msg_id is ABSENT:
        raise ValueError("request requires an id; use make_notification for none")
    return RpcMessage(
        kind=MessageKind.REQUEST, id=msg_id, method=method, params=params, envelope=envelope
    )


def make_notification(
    method: str, params: Any = ABSENT, envelope: McpSecEnvelope | None = None
) -> RpcMessage:
    return RpcMessage(
        kind=MessageKind.NOTIFICATION, method=method, params=params, envelope=envelope
    )


def make_response(msg_id: Any, result: Any, envelope: McpSecEnvelope | None = None) -> RpcMessage:
    return RpcMessage(kind=MessageKind.RESPONSE, id=msg_id, result=result, envelope=envelope)


def make_error_response(
    msg_id: Any, code: int, message: str, data: Any = ABSENT
) -> RpcMessage:
    return RpcMessage(
        kind=MessageKind.RESPONSE,
        id=msg_id,
        error=RpcError(code=code, message=message, data=data),
    )


class FrameReader:
    """Newline-delimited frame reader with a hard size limit.

    Reads from a binary stream.  A frame is everything up to (not
    including) the next ``\\n``; a trailing ``\\r`` is stripped so CRLF
    peers work.  EOF raises :class:`StreamClosed`; a line longer than
    the limit raises :class:`FrameTooLarge` after draining it so the
    stream stays usable.
    """

    def __init__(self, stream: BinaryIO, max_frame_bytes: int = MAX_FRAME_BYTES):
        self._stream = stream
        self._max = max_frame_bytes
        self._buffer = bytearray()
        self._eof = False
        # read1 returns whatever is available; plain read on a buffered
        # pipe would block until the full count arrives.
        self._read = getattr(stream, "read1", stream.read)

    def read_frame(self) -> bytes:
        while True:
            newline = self._buffer.find(b"\n")
            if newline >= 0:
                frame = bytes(self._buffer[:newline])
                del self._buffer[: newline + 1]
                if frame.endswith(b"\r"):
                    frame = frame[:-1]
                if len(frame) > self._max:
                    raise FrameTooLarge(f"frame of {len(frame)} bytes exceeds {self._max}")
                return frame
            if self._eof:
                raise StreamClosed("end of stream")
            if len(self._buffer) > self._max:
                # Drain the oversized line before failing so the caller
                # can keep reading subsequent frames.
                self._drain_line()
                raise FrameTooLarge(f"frame exceeds {self._max} bytes")
            chunk = self._read(65536)
            if not chunk:
                self._eof = True
                if self._buffer:
                    frame = bytes(self._buffer)
                    self._buffer.clear()
                    if len(frame) > self._max:
                        raise FrameTooLarge(f"frame of {len(frame)} bytes exceeds {self._max}")
                    return frame
            else:
                self._buffer.extend(chunk)

    def _drain_line(self) -> None:
        newline = self._buffer.find(b"\n")
        while newline < 0:
            self._buffer.clear()
            chunk = self._read(65536)
            if not chunk:
                self._eof = True
                return
            self._buffer.extend(chunk)
            newline = self._buffer.find(b"\n")
        del self._buffer[: newline + 1]


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    """Write one frame and flush.  Canonical JSON never contains a raw
    newline, but check anyway: an embedded newline would desynchronize
    the peer's framing."""
    if b"\n" in payload:
        raise ValueError("frame payload must not contain newlines")
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"refusing to send {len(payload)} byte frame")
    stream.write(payload + b"\n")
    stream.flush()
