"""Authenticated channels: session key agreement, per-message sealing
and verification, replay windows, and trust-on-first-use pinning.

A session key is agreed per connection with ephemeral X25519,
authenticated by the Ed25519 identity key bound into the server's
capability certificate.  Every subsequent message carries an HMAC-SHA256
envelope; verification rejects in a fixed order (tag, then freshness,
then replay) and a rejected message never mutates the replay window.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import json
import os
import random
import secrets
import time
from collections import OrderedDict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .attestation import CapabilityCert
from .messages import ABSENT, McpSecEnvelope, NONCE_LEN, RpcMessage, serialize_canonical

# Symmetric freshness bound: |now - timestamp| may be at most this.
MAX_CLOCK_SKEW = 30.0

# Sliding replay window size, per server.
NONCE_WINDOW_CAPACITY = 1000

_HS_PREFIX = b"mcpsec-hs-v1"
_SESSION_INFO = b"mcpsec-session-key-v1"

Clock = Callable[[], float]
NonceSource = Callable[[], bytes]


class ChannelError(Exception):
    """Base class for channel failures."""


class HandshakeSignatureInvalid(ChannelError):
    """The server's handshake signature does not verify under the
    certificate's identity key."""


class KeyAgreementFailure(ChannelError):
    """The X25519 exchange produced no usable shared secret."""


class PinStoreCorrupt(ChannelError):
    """Pin journal failed its integrity check."""


class VerifyOutcome(Enum):
    OK = "ok"
    NO_ENVELOPE = "no_envelope"
    BAD_TAG = "bad_tag"
    STALE = "stale"
    REPLAYED = "replayed"


def system_nonce_source() -> bytes:
    return secrets.token_bytes(NONCE_LEN)


class SeededNonceSource:
    """Deterministic nonce stream for reproducible runs."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def __call__(self) -> bytes:
        return self._rng.randbytes(NONCE_LEN)


def derive_session_key(
    shared_secret: bytes,
    client_public: bytes,
    server_public: bytes,
    signature: bytes,
    cert_fingerprint: bytes,
) -> bytes:
    """HKDF-SHA256 over the ECDH output, salted with a hash that binds
    the handshake transcript to the certificate fingerprint.  Both sides
    compute the same key only if they saw the same ephemerals, the same
    signature and the same certificate."""
    transcript = client_public + server_public + signature
    transcript_hash = hashlib.sha256(_HS_PREFIX + transcript + cert_fingerprint).digest()
    hkdf = HKDF(
        algorithm=SHA256(), length=32, salt=transcript_hash, info=_SESSION_INFO
    )
    return hkdf.derive(shared_secret)


def _exchange(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    try:
        shared = private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:
        raise KeyAgreementFailure(str(exc)) from exc
    if shared == bytes(32):
        raise KeyAgreementFailure("all-zero shared secret")
    return shared


@dataclass
class ClientHello:
    private: X25519PrivateKey
    public: bytes


def client_hello() -> ClientHello:
    key = X25519PrivateKey.generate()
    return ClientHello(private=key, public=key.public_key().public_bytes_raw())


@dataclass
class ServerResponse:
    public: bytes
    signature: bytes


def server_respond(
    client_public: bytes,
    identity_key: Ed25519PrivateKey,
    cert_fingerprint: bytes,
) -> tuple[ServerResponse, bytes]:
    """Server half of the handshake: fresh ephemeral, a signature over
    both ephemerals, and the derived session key."""
    eph = X25519PrivateKey.generate()
    server_public = eph.public_key().public_bytes_raw()
    signature = identity_key.sign(client_public + server_public)
    shared = _exchange(eph, client_public)
    key = derive_session_key(shared, client_public, server_public, signature, cert_fingerprint)
    return ServerResponse(public=server_public, signature=signature), key


def client_finish(
    hello: ClientHello, response: ServerResponse, cert: CapabilityCert
) -> bytes:
    """Gateway half: verify the signature under the certificate's
    identity key, then derive the session key."""
    try:
        Ed25519PublicKey.from_public_bytes(cert.public_key).verify(
            response.signature, hello.public + response.public
        )
    except (InvalidSignature, ValueError) as exc:
        raise HandshakeSignatureInvalid(str(exc)) from exc
    shared = _exchange(hello.private, response.public)
    return derive_session_key(
        shared, hello.public, response.public, response.signature, cert.fingerprint_bytes()
    )


def establish_session(
    cert: CapabilityCert, identity_key: Ed25519PrivateKey
) -> tuple[bytes, bytes]:
    """Run both halves in-process; returns (gateway_key, server_key).

    The two are always equal when the handshake succeeds; returning both
    lets callers assert that rather than assume it.
    """
    hello = client_hello()
    response, server_key = server_respond(
        hello.public, identity_key, cert.fingerprint_bytes()
    )
    gateway_key = client_finish(hello, response, cert)
    return gateway_key, server_key


class NonceWindow:
    """Sliding window of recently seen nonces with oldest-first eviction.

    Membership is exact within the window.  A nonce that has been
    evicted by newer traffic and arrives again inside the freshness
    bound will be accepted; the window bounds memory, the timestamp
    bounds how long that gap stays open.
    """

    def __init__(self, capacity: int = NONCE_WINDOW_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[bytes, None] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, nonce: bytes) -> bool:
        return nonce in self._entries

    def insert(self, nonce: bytes) -> None:
        self._entries[nonce] = None
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)


def seal_message(
    msg: RpcMessage,
    session_key: bytes,
    server_id: str,
    clock: Clock = time.time,
    nonce_source: NonceSource = system_nonce_source,
) -> RpcMessage:
    """Attach a fresh envelope to a copy of the message.

    The tag is HMAC-SHA256 over the canonical serialization of the
    message including the envelope but excluding the hmac field itself.
    """
    envelope = McpSecEnvelope(
        server_id=server_id, timestamp=clock(), nonce=nonce_source(), hmac=b""
    )
    sealed = replace(msg, envelope=envelope, envelope_raw=ABSENT)
    mac_input = serialize_canonical(sealed, exclude_hmac=True)
    envelope.hmac = hmac_mod.new(session_key, mac_input, hashlib.sha256).digest()
    return sealed


def verify_message(
    msg: RpcMessage,
    session_key: bytes,
    window: NonceWindow,
    clock: Clock = time.time,
    expected_server_id: str | None = None,
    max_skew: float = MAX_CLOCK_SKEW,
) -> VerifyOutcome:
    """Check a message's envelope against a session.

    Rejection order is fixed: tag first, then freshness, then replay.
    Only full acceptance inserts the nonce; every rejection leaves the
    window exactly as it was.
    """
    if not msg.has_envelope:
        return VerifyOutcome.NO_ENVELOPE
    if msg.envelope_malformed:
        return VerifyOutcome.BAD_TAG
    envelope = msg.envelope
    assert envelope is not None
    if expected_server_id is not None and envelope.server_id != expected_server_id:
        return VerifyOutcome.BAD_TAG
    mac_input = serialize_canonical(msg, exclude_hmac=True)
    expected = hmac_mod.new(session_key, mac_input, hashlib.sha256).digest()
    if not hmac_mod.compare_digest(expected, envelope.hmac):
        return VerifyOutcome.BAD_TAG
    if abs(clock() - envelope.timestamp) > max_skew:
        return VerifyOutcome.STALE
    if envelope.nonce in window:
        return VerifyOutcome.REPLAYED
    window.insert(envelope.nonce)
    return VerifyOutcome.OK


class PinOutcome(Enum):
    OK = "ok"
    FIRST_CONTACT = "first_contact"
    DOWNGRADE_DETECTED = "downgrade_detected"
    FINGERPRINT_CHANGED = "fingerprint_changed"


@dataclass
class PinRecord:
    server_id: str
    attested: bool
    fingerprint: str | None
    first_seen: float
    last_seen: float

    def to_obj(self) -> dict[str, Any]:
        return {
            "server_id": self.server_id,
            "attested": self.attested,
            "fingerprint": self.fingerprint,
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "PinRecord":
        try:
            return cls(
                server_id=obj["server_id"],
                attested=bool(obj["attested"]),
                fingerprint=obj["fingerprint"],
                first_seen=obj["first_seen"],
                last_seen=obj["last_seen"],
            )
        except (KeyError, TypeError) as exc:
            raise PinStoreCorrupt("malformed pin record") from exc


class PinStore:
    """Trust-on-first-use pins, persisted as a JSON-lines journal with a
    trailing checksum line.

    A pin's ``attested`` flag only ever moves from False to True.  Once
    a server has authenticated, showing up without credentials is a
    downgrade and showing up with a different certificate is a
    fingerprint change; neither silently rewrites the pin.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self._pins: dict[str, PinRecord] = {}
        if path is not None and os.path.exists(path):
            self._load(path)

    def _load(self, path: str) -> None:
        with open(path, "rb") as fh:
            raw = fh.read()
        lines = raw.split(b"\n")
        while lines and lines[-1] == b"":
            lines.pop()
        if not lines:
            return
        try:
            trailer = json.loads(lines[-1])
        except ValueError as exc:
            raise PinStoreCorrupt("trailing checksum line is not JSON") from exc
        if not isinstance(trailer, dict) or "checksum" not in trailer:
            raise PinStoreCorrupt("journal missing checksum trailer")
        body = b"".join(line + b"\n" for line in lines[:-1])
        digest = hashlib.sha256(body).hexdigest()
        if not hmac_mod.compare_digest(digest, str(trailer["checksum"])):
            raise PinStoreCorrupt("pin journal checksum mismatch")
        for lineno, line in enumerate(lines[:-1], 1):
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise PinStoreCorrupt(f"line {lineno}: not JSON") from exc
            record = PinRecord.from_obj(obj)
            self._pins[record.server_id] = record

    def save(self) -> None:
        if self.path is None:
            return
        body = b"".join(
            json.dumps(self._pins[sid].to_obj(), sort_keys=True,
                       separators=(",", ":")).encode("utf-8") + b"\n"
            for sid in sorted(self._pins)
        )
        trailer = json.dumps(
            {"checksum": hashlib.sha256(body).hexdigest()}, separators=(",", ":")
        ).encode("utf-8")
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(body + trailer + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def get(self, server_id: str) -> PinRecord | None:
        return self._pins.get(server_id)

    def observe(
        self,
        server_id: str,
        attested: bool,
        fingerprint: str | None,
        now: float,
    ) -> PinOutcome:
        """Record a contact and classify it against the pin.

        ``attested`` reflects whether this contact presented a
        certificate the verifier accepted; ``fingerprint`` identifies
        which certificate, when attested.
        """
        record = self._pins.get(server_id)
        if record is None:
            self._pins[server_id] = PinRecord(
                server_id=server_id,
                attested=attested,
                fingerprint=fingerprint if attested else None,
                first_seen=now,
                last_seen=now,
            )
            self.save()
            return PinOutcome.FIRST_CONTACT
        if record.attested and not attested:
            # The pin stays attested; the contact is flagged instead.
            record.last_seen = now
            self.save()
            return PinOutcome.DOWNGRADE_DETECTED
        if record.attested and attested and record.fingerprint != fingerprint:
            record.last_seen = now
            self.save()
            return PinOutcome.FINGERPRINT_CHANGED
        if not record.attested and attested:
            record.attested = True
            record.fingerprint = fingerprint
        record.last_seen = now
        self.save()
        return PinOutcome.OK
