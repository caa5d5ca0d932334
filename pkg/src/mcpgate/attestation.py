"""Capability attestation: signed capability certificates, a federated
trust store with cross-signed authorities, revocation lists, and a
cached verifier.

A server does not get to assert its own capabilities.  It presents a
certificate in which an authority binds ``server_id`` to a set of
capability classes and to the server's Ed25519 identity key; the gateway
checks the chain back to a configured root before any capability-gated
traffic is allowed through.
"""

from __future__ import annotations

import base64
import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .messages import CapabilityClass, canonical_json_bytes

CERT_KEY = "capability_cert"
CRL_KEY = "crl"
TRUST_STORE_KEY = "trust_store"

SERIAL_HEX_LEN = 32  # 16 bytes
ED25519_KEY_LEN = 32
ED25519_SIG_LEN = 64

# An authority is trusted when reachable from a root in at most this
# many cross-signature hops.
MAX_CROSS_SIGN_DEPTH = 2

VERDICT_CACHE_TTL = 300.0

_CAPABILITY_VALUES = {c.value for c in CapabilityClass}


class AttestationError(Exception):
    """Base class for attestation failures."""


class CertMalformed(AttestationError):
    """Certificate structure does not match the wire format."""


class CrlInvalid(AttestationError):
    """Revocation list rejected: bad structure, unknown issuer or bad
    signature."""


class TrustStoreInvalid(AttestationError):
    """Trust store file rejected."""


class Verdict(Enum):
    """Certificate verification outcomes.

    When several defects apply at once the most severe one is reported:
    a bad signature outranks an unknown authority, which outranks
    revocation, which outranks being outside the validity window, which
    outranks a stale revocation list.
    """

    VALID = "valid"
    STALE_CRL = "stale_crl"
    EXPIRED = "expired"
    NOT_YET_VALID = "not_yet_valid"
    REVOKED = "revoked"
    UNKNOWN_AUTHORITY = "unknown_authority"
    BAD_SIGNATURE = "bad_signature"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CertMalformed(message)


def _decode_b64(value: Any, length: int, what: str, exc: type[AttestationError]) -> bytes:
    if not isinstance(value, str):
        raise exc(f"{what} must be a base64 string")
    try:
        raw = base64.b64decode(value, validate=True)
    except (ValueError, TypeError) as err:
        raise exc(f"{what} is not valid base64") from err
    if base64.b64encode(raw).decode("ascii") != value:
        raise exc(f"{what} is not canonical base64")
    if len(raw) != length:
        raise exc(f"{what} must decode to {length} bytes")
    return raw


def _check_timestamp(value: Any, what: str, exc: type[AttestationError]) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise exc(f"{what} must be a number")
    return value


@dataclass(frozen=True)
class CapabilityCert:
    """Parsed capability certificate.

    ``inner`` retains the exact wire object so canonical bytes (for the
    signature and the fingerprint) never depend on re-assembly.
    Validity is the half-open window [issued_at, expires_at).
    """

    server_id: str
    capabilities: tuple[str, ...]
    issued_by: str
    issued_at: float
    expires_at: float
    serial: str
    public_key: bytes
    signature: bytes
    inner: dict[str, Any] = field(repr=False)

    def has_capability(self, cap: CapabilityClass) -> bool:
        return cap.value in self.capabilities

    def signed_body(self) -> bytes:
        body = {k: v for k, v in self.inner.items() if k != "signature"}
        return canonical_json_bytes(body)

    def fingerprint(self) -> str:
        """SHA-256 over the canonical full body, signature included."""
        return hashlib.sha256(canonical_json_bytes(self.inner)).hexdigest()

    def fingerprint_bytes(self) -> bytes:
        return bytes.fromhex(self.fingerprint())

    def to_obj(self) -> dict[str, Any]:
        return {CERT_KEY: dict(self.inner)}


_CERT_FIELDS = {
    "server_id",
    "capabilities",
    "issued_by",
    "issued_at",
    "expires_at",
    "serial",
    "public_key",
    "signature",
}


def parse_certificate(obj: Any) -> CapabilityCert:
    """Parse the ``{"capability_cert": {...}}`` wire form.

    Raises :class:`CertMalformed` for any structural defect, including
    unsorted or duplicated capability lists; a certificate that does not
    match the format byte for byte is not worth a signature check.
    """
    if not isinstance(obj, dict) or set(obj) != {CERT_KEY}:
        raise CertMalformed("expected a single capability_cert member")
    inner = obj[CERT_KEY]
    if not isinstance(inner, dict):
        raise CertMalformed("capability_cert must be an object")
    if set(inner) != _CERT_FIELDS:
        raise CertMalformed(f"capability_cert must have exactly {sorted(_CERT_FIELDS)}")

    server_id = inner["server_id"]
    _require(isinstance(server_id, str) and bool(server_id), "server_id must be a non-empty string")
    issued_by = inner["issued_by"]
    _require(isinstance(issued_by, str) and bool(issued_by), "issued_by must be a non-empty string")

    caps = inner["capabilities"]
    _require(isinstance(caps, list), "capabilities must be a list")
    for cap in caps:
        _require(isinstance(cap, str), "capability entries must be strings")
        _require(cap in _CAPABILITY_VALUES, f"unknown capability {cap!r}")
    _require(len(set(caps)) == len(caps), "capabilities must not repeat")
    _require(caps == sorted(caps), "capabilities must be sorted")

    issued_at = _check_timestamp(inner["issued_at"], "issued_at", CertMalformed)
    expires_at = _check_timestamp(inner["expires_at"], "expires_at", CertMalformed)

    serial = inner["serial"]
    _require(isinstance(serial, str), "serial must be a string")
    _require(len(serial) == SERIAL_HEX_LEN, "serial must be 16 bytes of hex")
    _require(all(c in "0123456789abcdef" for c in serial), "serial must be lowercase hex")

    public_key = _decode_b64(inner["public_key"], ED25519_KEY_LEN, "public_key", CertMalformed)
    signature = _decode_b64(inner["signature"], ED25519_SIG_LEN, "signature", CertMalformed)

    return CapabilityCert(
        server_id=server_id,
        capabilities=tuple(caps),
        issued_by=issued_by,
        issued_at=issued_at,
        expires_at=expires_at,
        serial=serial,
        public_key=public_key,
        signature=signature,
        inner=inner,
    )


def load_certificate(path: str) -> CapabilityCert:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except ValueError as exc:
            raise CertMalformed(f"{path}: not valid JSON") from exc
    return parse_certificate(obj)


@dataclass(frozen=True)
class CrossSignature:
    """One federation edge: ``signer`` vouches for ``signee``'s key."""

    signer: str
    signee: str
    signee_public_key: bytes
    signature: bytes

    def signed_body(self) -> bytes:
        return canonical_json_bytes(
            {
                "signer": self.signer,
                "signee": self.signee,
                "signee_public_key": base64.b64encode(self.signee_public_key).decode("ascii"),
            }
        )

    def to_obj(self) -> dict[str, Any]:
        return {
            "signer": self.signer,
            "signee": self.signee,
            "signee_public_key": base64.b64encode(self.signee_public_key).decode("ascii"),
            "signature": base64.b64encode(self.signature).decode("ascii"),
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "CrossSignature":
        if not isinstance(obj, dict) or set(obj) != {
            "signer",
            "signee",
            "signee_public_key",
            "signature",
        }:
            raise TrustStoreInvalid("cross signature needs signer, signee, key, signature")
        signer = obj["signer"]
        signee = obj["signee"]
        if not isinstance(signer, str) or not isinstance(signee, str):
            raise TrustStoreInvalid("cross signature ids must be strings")
        key = _decode_b64(obj["signee_public_key"], ED25519_KEY_LEN, "signee_public_key",
                          TrustStoreInvalid)
        sig = _decode_b64(obj["signature"], ED25519_SIG_LEN, "signature", TrustStoreInvalid)
        return cls(signer=signer, signee=signee, signee_public_key=key, signature=sig)


def _ed25519_ok(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


class TrustStore:
    """Roots plus cross-signature edges.

    Key resolution walks verified edges breadth first from the roots, at
    most :data:`MAX_CROSS_SIGN_DEPTH` hops.  A root's configured key
    always wins over anything an edge claims; among edges, the shallower
    resolution wins, then file order.
    """

    def __init__(self, roots: dict[str, bytes], cross_signatures: list[CrossSignature]):
        self.roots = dict(roots)
        self.cross_signatures = list(cross_signatures)
        self._resolved = self._resolve_all()

    def _resolve_all(self) -> dict[str, bytes]:
        resolved = dict(self.roots)
        frontier = set(self.roots)
        for _ in range(MAX_CROSS_SIGN_DEPTH):
            added: set[str] = set()
            for edge in self.cross_signatures:
                if edge.signer not in frontier:
                    continue
                if edge.signee in resolved:
                    continue
                if edge.signee in added:
                    continue
                if _ed25519_ok(resolved[edge.signer], edge.signed_body(), edge.signature):
                    resolved[edge.signee] = edge.signee_public_key
                    added.add(edge.signee)
            frontier = added
            if not frontier:
                break
        return resolved

    def resolve_key(self, authority_id: str) -> bytes | None:
        return self._resolved.get(authority_id)

    def is_trusted(self, authority_id: str) -> bool:
        return authority_id in self._resolved

    def trusted_authorities(self) -> set[str]:
        return set(self._resolved)

    def to_obj(self) -> dict[str, Any]:
        return {
            TRUST_STORE_KEY: {
                "roots": {
                    aid: base64.b64encode(key).decode("ascii")
                    for aid, key in sorted(self.roots.items())
                },
                "cross_signatures": [e.to_obj() for e in self.cross_signatures],
            }
        }

    @classmethod
    def from_obj(cls, obj: Any) -> "TrustStore":
        if not isinstance(obj, dict) or TRUST_STORE_KEY not in obj:
            raise TrustStoreInvalid("expected a trust_store member")
        body = obj[TRUST_STORE_KEY]
        if not isinstance(body, dict) or set(body) - {"roots", "cross_signatures"}:
            raise TrustStoreInvalid("trust_store allows only roots and cross_signatures")
        roots_obj = body.get("roots", {})
        if not isinstance(roots_obj, dict):
            raise TrustStoreInvalid("roots must be an object")
        roots = {
            aid: _decode_b64(key, ED25519_KEY_LEN, f"root key for {aid}", TrustStoreInvalid)
            for aid, key in roots_obj.items()
        }
        edges_obj = body.get("cross_signatures", [])
        if not isinstance(edges_obj, list):
            raise TrustStoreInvalid("cross_signatures must be a list")
        edges = [CrossSignature.from_obj(e) for e in edges_obj]
        return cls(roots=roots, cross_signatures=edges)

    @classmethod
    def from_file(cls, path: str) -> "TrustStore":
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except ValueError as exc:
                raise TrustStoreInvalid(f"{path}: not valid JSON") from exc
        return cls.from_obj(obj)


@dataclass(frozen=True)
class RevokedEntry:
    serial: str
    revoked_at: float
    reason: str


@dataclass(frozen=True)
class Crl:
    """Parsed revocation list.

    A listed serial stays revoked even after the list goes stale past
    ``next_update``; staleness only weakens the assurance for serials
    that are absent.
    """

    issuer: str
    issued_at: float
    next_update: float
    revoked: tuple[RevokedEntry, ...]
    signature: bytes
    inner: dict[str, Any] = field(repr=False)

    def signed_body(self) -> bytes:
        body = {k: v for k, v in self.inner.items() if k != "signature"}
        return canonical_json_bytes(body)

    def is_stale(self, now: float) -> bool:
        return now >= self.next_update

    def revoked_serials(self) -> set[str]:
        return {e.serial for e in self.revoked}

    def to_obj(self) -> dict[str, Any]:
        return {CRL_KEY: dict(self.inner)}


def parse_crl(obj: Any) -> Crl:
    if not isinstance(obj, dict) or set(obj) != {CRL_KEY}:
        raise CrlInvalid("expected a single crl member")
    inner = obj[CRL_KEY]
    if not isinstance(inner, dict) or set(inner) != {
        "issuer",
        "issued_at",
        "next_update",
        "revoked",
        "signature",
    }:
        raise CrlInvalid("crl must have issuer, issued_at, next_update, revoked, signature")
    issuer = inner["issuer"]
    if not isinstance(issuer, str) or not issuer:
        raise CrlInvalid("issuer must be a non-empty string")
    issued_at = _check_timestamp(inner["issued_at"], "issued_at", CrlInvalid)
    next_update = _check_timestamp(inner["next_update"], "next_update", CrlInvalid)
    revoked_obj = inner["revoked"]
    if not isinstance(revoked_obj, list):
        raise CrlInvalid("revoked must be a list")
    entries = []
    for item in revoked_obj:
        if not isinstance(item, dict) or set(item) != {"serial", "revoked_at", "reason"}:
            raise CrlInvalid("revoked entries need serial, revoked_at, reason")
        serial = item["serial"]
        if not isinstance(serial, str) or len(serial) != SERIAL_HEX_LEN:
            raise CrlInvalid("revoked serial must be 16 bytes of hex")
        reason = item["reason"]
        if not isinstance(reason, str):
            raise CrlInvalid("revocation reason must be a string")
        entries.append(
            RevokedEntry(
                serial=serial,
                revoked_at=_check_timestamp(item["revoked_at"], "revoked_at", CrlInvalid),
                reason=reason,
            )
        )
    signature = _decode_b64(inner["signature"], ED25519_SIG_LEN, "signature", CrlInvalid)
    return Crl(
        issuer=issuer,
        issued_at=issued_at,
        next_update=next_update,
        revoked=tuple(entries),
        signature=signature,
        inner=inner,
    )


class AttestationVerifier:
    """Verdict computation over a trust store and loaded revocation
    lists, with a fingerprint-keyed verdict cache.

    Cache entries expire after ``cache_ttl`` seconds, are dropped for an
    issuer whenever that issuer's revocation list is (re)loaded, and are
    never served across a validity or staleness boundary: a cached Valid
    can not outlive the certificate's own expiry.
    """

    def __init__(self, trust_store: TrustStore, cache_ttl: float = VERDICT_CACHE_TTL):
        self.trust_store = trust_store
        self.cache_ttl = cache_ttl
        self._crls: dict[str, Crl] = {}
        # fingerprint -> (computed_at, verdict, issuer, boundaries)
        self._cache: dict[str, tuple[float, Verdict, str, tuple[float, ...]]] = {}
        self.cache_hits = 0
        self.cache_misses = 0

    def load_crl(self, obj: Any) -> Crl:
        """Validate and install a revocation list.

        Raises :class:`CrlInvalid` when the issuer is not trusted or the
        signature does not verify.  Installing drops every cached verdict
        for that issuer so revocation takes effect immediately.
        """
        crl = parse_crl(obj) if not isinstance(obj, Crl) else obj
        key = self.trust_store.resolve_key(crl.issuer)
        if key is None:
            raise CrlInvalid(f"issuer {crl.issuer!r} is not a trusted authority")
        if not _ed25519_ok(key, crl.signed_body(), crl.signature):
            raise CrlInvalid(f"signature on crl from {crl.issuer!r} does not verify")
        self._crls[crl.issuer] = crl
        self.invalidate_issuer(crl.issuer)
        return crl

    def load_crl_file(self, path: str) -> Crl:
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except ValueError as exc:
                raise CrlInvalid(f"{path}: not valid JSON") from exc
        return self.load_crl(obj)

    def crl_for(self, issuer: str) -> Crl | None:
        return self._crls.get(issuer)

    def invalidate_issuer(self, issuer: str) -> None:
        self._cache = {
            fp: entry for fp, entry in self._cache.items() if entry[2] != issuer
        }

    def verify(self, cert: CapabilityCert, now: float) -> Verdict:
        fp = cert.fingerprint()
        cached = self._cache.get(fp)
        if cached is not None:
            computed_at, verdict, _, boundaries = cached
            if (
                0 <= now - computed_at < self.cache_ttl
                and bisect_right(boundaries, now) == bisect_right(boundaries, computed_at)
            ):
                self.cache_hits += 1
                return verdict
        self.cache_misses += 1
        verdict = self._verify_uncached(cert, now)
        boundaries = [cert.issued_at, cert.expires_at]
        crl = self._crls.get(cert.issued_by)
        if crl is not None:
            boundaries.append(crl.next_update)
        self._cache[fp] = (now, verdict, cert.issued_by, tuple(sorted(boundaries)))
        return verdict

    def _verify_uncached(self, cert: CapabilityCert, now: float) -> Verdict:
        issuer_key = self.trust_store.resolve_key(cert.issued_by)
        if issuer_key is None:
            return Verdict.UNKNOWN_AUTHORITY
        if not _ed25519_ok(issuer_key, cert.signed_body(), cert.signature):
            return Verdict.BAD_SIGNATURE
        crl = self._crls.get(cert.issued_by)
        if crl is not None and cert.serial in crl.revoked_serials():
            return Verdict.REVOKED
        if now < cert.issued_at:
            return Verdict.NOT_YET_VALID
        if now >= cert.expires_at:
            return Verdict.EXPIRED
        if crl is not None and crl.is_stale(now):
            return Verdict.STALE_CRL
        return Verdict.VALID


def check_capability(cert: CapabilityCert, cap: CapabilityClass) -> bool:
    """True when the certificate attests the given capability class.

    Deliberately independent of verification: callers must consult both
    the verdict and the capability set, never one as a proxy for the
    other.
    """
    return cert.has_capability(cap)
