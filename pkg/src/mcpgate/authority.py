"""Capability authority: key generation, certificate issuance,
revocation bookkeeping, revocation list emission and cross-signing.

An authority lives in a directory holding its signing key and an
append-only issuance ledger.  Revocation lists are derived from the
ledger, so `issue` and `revoke` are the only operations that mutate
state and both go through an exclusive file lock.
"""

from __future__ import annotations

import base64
import fcntl
import json
import os
import secrets
import time
from dataclasses import dataclass
from typing import Any

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .attestation import (
    CERT_KEY,
    CRL_KEY,
    SERIAL_HEX_LEN,
    CapabilityCert,
    CrossSignature,
    parse_certificate,
)
from .messages import CapabilityClass, canonical_json_bytes

AUTHORITY_KEY_FILE = "authority_key.json"
TRUST_STORE_FILE = "trust_store.json"
LEDGER_FILE = "ledger.jsonl"

_CAPABILITY_VALUES = {c.value for c in CapabilityClass}


class AuthorityError(Exception):
    """Base class for authority-side failures."""


class LedgerError(AuthorityError):
    """Issuance ledger missing, corrupt, or inconsistent with a request."""


@dataclass
class AuthorityKey:
    """An authority's Ed25519 signing identity."""

    authority_id: str
    private_key: Ed25519PrivateKey

    @property
    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes_raw()

    def sign(self, message: bytes) -> bytes:
        return self.private_key.sign(message)

    def to_obj(self) -> dict[str, Any]:
        return {
            "authority_key": {
                "authority_id": self.authority_id,
                "public_key": base64.b64encode(self.public_bytes).decode("ascii"),
                "private_key": base64.b64encode(
                    self.private_key.private_bytes_raw()
                ).decode("ascii"),
            }
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "AuthorityKey":
        try:
            inner = obj["authority_key"]
            authority_id = inner["authority_id"]
            private_raw = base64.b64decode(inner["private_key"], validate=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise AuthorityError("malformed authority key file") from exc
        if not isinstance(authority_id, str) or not authority_id:
            raise AuthorityError("authority_id must be a non-empty string")
        if len(private_raw) != 32:
            raise AuthorityError("private key must be 32 bytes")
        return cls(
            authority_id=authority_id,
            private_key=Ed25519PrivateKey.from_private_bytes(private_raw),
        )


def generate_authority_key(authority_id: str) -> AuthorityKey:
    return AuthorityKey(authority_id=authority_id, private_key=Ed25519PrivateKey.generate())


@dataclass
class ServerIdentity:
    """A server's Ed25519 identity keypair, bound into its certificate."""

    server_id: str
    private_key: Ed25519PrivateKey

    @property
    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes_raw()

    def to_obj(self) -> dict[str, Any]:
        return {
            "server_key": {
                "server_id": self.server_id,
                "public_key": base64.b64encode(self.public_bytes).decode("ascii"),
                "private_key": base64.b64encode(
                    self.private_key.private_bytes_raw()
                ).decode("ascii"),
            }
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "ServerIdentity":
        try:
            inner = obj["server_key"]
            server_id = inner["server_id"]
            private_raw = base64.b64decode(inner["private_key"], validate=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise AuthorityError("malformed server key file") from exc
        if len(private_raw) != 32:
            raise AuthorityError("private key must be 32 bytes")
        return cls(server_id=server_id, private_key=Ed25519PrivateKey.from_private_bytes(private_raw))


def generate_server_identity(server_id: str) -> ServerIdentity:
    return ServerIdentity(server_id=server_id, private_key=Ed25519PrivateKey.generate())


def _write_private_json(path: str, obj: dict[str, Any]) -> None:
    # Private key material: owner read/write only, written atomically.
    tmp = path + ".tmp"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except BaseException:
        os.unlink(tmp)
        raise
    os.replace(tmp, path)


def write_json(path: str, obj: dict[str, Any]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)


def new_serial() -> str:
    return secrets.token_hex(16)


def build_certificate(
    authority: AuthorityKey,
    server_id: str,
    capabilities: list[str] | list[CapabilityClass],
    issued_at: float,
    expires_at: float,
    server_public_key: bytes,
    serial: str | None = None,
) -> CapabilityCert:
    """Assemble and sign a capability certificate.

    Capability input may be enum members or their string values; the
    certificate always carries the sorted, de-duplicated string form.
    """
    caps = sorted(
        {c.value if isinstance(c, CapabilityClass) else str(c) for c in capabilities}
    )
    for cap in caps:
        if cap not in _CAPABILITY_VALUES:
            raise AuthorityError(f"unknown capability {cap!r}")
    if not caps:
        raise AuthorityError("certificate needs at least one capability")
    if not (expires_at > issued_at):
        raise AuthorityError("expires_at must be after issued_at")
    if len(server_public_key) != 32:
        raise AuthorityError("server public key must be 32 bytes")
    if serial is None:
        serial = new_serial()
    if len(serial) != SERIAL_HEX_LEN or any(c not in "0123456789abcdef" for c in serial):
        raise AuthorityError("serial must be 16 bytes of lowercase hex")

    body = {
        "server_id": server_id,
        "capabilities": caps,
        "issued_by": authority.authority_id,
        "issued_at": issued_at,
        "expires_at": expires_at,
        "serial": serial,
        "public_key": base64.b64encode(server_public_key).decode("ascii"),
    }
    signature = authority.sign(canonical_json_bytes(body))
    inner = dict(body, signature=base64.b64encode(signature).decode("ascii"))
    return parse_certificate({CERT_KEY: inner})


def build_crl(
    authority: AuthorityKey,
    revoked: list[dict[str, Any]],
    issued_at: float,
    next_update: float,
) -> dict[str, Any]:
    """Assemble and sign a revocation list object.

    ``revoked`` entries need serial, revoked_at and reason; output is
    sorted by serial so emission is deterministic for a given ledger.
    """
    if not (next_update > issued_at):
        raise AuthorityError("next_update must be after issued_at")
    entries = []
    for item in sorted(revoked, key=lambda e: e["serial"]):
        entries.append(
            {
                "serial": item["serial"],
                "revoked_at": item["revoked_at"],
                "reason": item["reason"],
            }
        )
    body = {
        "issuer": authority.authority_id,
        "issued_at": issued_at,
        "next_update": next_update,
        "revoked": entries,
    }
    signature = authority.sign(canonical_json_bytes(body))
    inner = dict(body, signature=base64.b64encode(signature).decode("ascii"))
    return {CRL_KEY: inner}


def build_cross_signature(
    signer: AuthorityKey, signee_id: str, signee_public_key: bytes
) -> CrossSignature:
    body = {
        "signer": signer.authority_id,
        "signee": signee_id,
        "signee_public_key": base64.b64encode(signee_public_key).decode("ascii"),
    }
    signature = signer.sign(canonical_json_bytes(body))
    return CrossSignature(
        signer=signer.authority_id,
        signee=signee_id,
        signee_public_key=signee_public_key,
        signature=signature,
    )


def _append_ledger(path: str, entry: dict[str, Any]) -> None:
    line = json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _read_ledger(path: str) -> list[dict[str, Any]]:
    if not os.path.exists(path):
        return []
    entries = []
    with open(path, encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_SH)
        try:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entries.append(json.loads(line))
                except ValueError as exc:
                    raise LedgerError(f"{path}:{lineno}: corrupt ledger line") from exc
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
    return entries


class Authority:
    """Directory-backed authority: signing key plus issuance ledger."""

    def __init__(self, directory: str, key: AuthorityKey):
        self.directory = directory
        self.key = key

    @property
    def authority_id(self) -> str:
        return self.key.authority_id

    @property
    def ledger_path(self) -> str:
        return os.path.join(self.directory, LEDGER_FILE)

    @classmethod
    def create(cls, directory: str, authority_id: str) -> "Authority":
        os.makedirs(directory, exist_ok=True)
        key_path = os.path.join(directory, AUTHORITY_KEY_FILE)
        if os.path.exists(key_path):
            raise AuthorityError(f"{key_path} already exists")
        key = generate_authority_key(authority_id)
        _write_private_json(key_path, key.to_obj())
        return cls(directory, key)

    @classmethod
    def load(cls, directory: str) -> "Authority":
        key_path = os.path.join(directory, AUTHORITY_KEY_FILE)
        try:
            with open(key_path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise AuthorityError(f"no authority key at {key_path}")
        except ValueError as exc:
            raise AuthorityError(f"{key_path}: not valid JSON") from exc
        return cls(directory, AuthorityKey.from_obj(obj))

    def issue(
        self,
        server_id: str,
        capabilities: list[str],
        issued_at: float,
        expires_at: float,
        server_public_key: bytes | None = None,
        serial: str | None = None,
        evidence: str | None = None,
    ) -> tuple[CapabilityCert, ServerIdentity | None]:
        """Issue a certificate, recording it in the ledger.

        When no server public key is supplied a fresh identity keypair is
        generated and returned alongside the certificate; the caller is
        responsible for delivering the private half to the server.
        ``evidence`` labels how the operator verified the server's
        identity; it lives in the ledger, never in the signed body.
        """
        identity: ServerIdentity | None = None
        if server_public_key is None:
            identity = generate_server_identity(server_id)
            server_public_key = identity.public_bytes
        cert = build_certificate(
            self.key,
            server_id=server_id,
            capabilities=capabilities,
            issued_at=issued_at,
            expires_at=expires_at,
            server_public_key=server_public_key,
            serial=serial,
        )
        entry = {
            "op": "issue",
            "serial": cert.serial,
            "server_id": server_id,
            "capabilities": list(cert.capabilities),
            "issued_at": issued_at,
            "expires_at": expires_at,
            "recorded_at": time.time(),
        }
        if evidence is not None:
            entry["identity_evidence"] = evidence
        _append_ledger(self.ledger_path, entry)
        return cert, identity

    def issued_serials(self) -> set[str]:
        return {e["serial"] for e in _read_ledger(self.ledger_path)
                if e.get("op") == "issue"}

    def revoke(self, serial: str, reason: str, revoked_at: float,
               require_issued: bool = True) -> None:
        """Record a revocation.  By default the serial must appear in
        this authority's ledger as issued; ``require_issued=False``
        records unknown serials defensively.  Revoking twice is a
        no-op error either way."""
        entries = _read_ledger(self.ledger_path)
        if require_issued:
            issued = {e["serial"] for e in entries if e.get("op") == "issue"}
            if serial not in issued:
                raise LedgerError(f"serial {serial} was never issued by this authority")
        already = {e["serial"] for e in entries if e.get("op") == "revoke"}
        if serial in already:
            raise LedgerError(f"serial {serial} is already revoked")
        _append_ledger(
            self.ledger_path,
            {
                "op": "revoke",
                "serial": serial,
                "reason": reason,
                "revoked_at": revoked_at,
                "recorded_at": time.time(),
            },
        )

    def revocations(self) -> list[dict[str, Any]]:
        return [
            {"serial": e["serial"], "revoked_at": e["revoked_at"], "reason": e["reason"]}
            for e in _read_ledger(self.ledger_path)
            if e.get("op") == "revoke"
        ]

    def emit_crl(self, issued_at: float, next_update: float) -> dict[str, Any]:
        return build_crl(self.key, self.revocations(), issued_at, next_update)

    def cross_sign(self, signee_id: str, signee_public_key: bytes) -> CrossSignature:
        return build_cross_signature(self.key, signee_id, signee_public_key)
