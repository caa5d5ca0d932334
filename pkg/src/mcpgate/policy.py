"""Policy: per-message authorization, sampling origin tags, taint
tracking and cross-server flow isolation with operator consent.

Authorization is a pure decision table over (certificate state, method
classification, gateway mode).  Its one hard rule: an attested server
using a capability its certificate does not list is blocked in every
mode.  Everything else degrades gracefully from Permissive through
Prompt to Strict, never getting more permissive as the mode tightens.
"""

from __future__ import annotations

import copy
import itertools
import secrets
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .attestation import Verdict
from .messages import (
    CapabilityClass,
    MethodClassification,
    ORIGIN_KEY,
    RpcMessage,
)

CONSENT_TIMEOUT = 60.0


class GatewayMode(Enum):
    PERMISSIVE = "permissive"
    PROMPT = "prompt"
    STRICT = "strict"


class IsolationLevel(Enum):
    NONE = "none"
    USER_PROMPTED = "prompted"
    STRICT = "strict"


class Action(Enum):
    FORWARD = "forward"
    FORWARD_WITH_WARNING = "forward_with_warning"
    NEEDS_CONSENT = "needs_consent"
    BLOCK = "block"


# Higher is more permissive; tightening the mode must never raise it.
_PERMISSIVENESS = {
    Action.FORWARD: 3,
    Action.FORWARD_WITH_WARNING: 2,
    Action.NEEDS_CONSENT: 1,
    Action.BLOCK: 0,
}


def permissiveness(action: Action) -> int:
    return _PERMISSIVENESS[action]


class Reason(Enum):
    ATTESTED = "attested"
    NEUTRAL_METHOD = "neutral_method"
    RESPONSE = "response"
    CAPABILITY_VIOLATION = "capability_violation"
    UNKNOWN_METHOD = "unknown_method"
    UNATTESTED = "unattested"
    STALE_CRL = "stale_crl"
    CERT_REVOKED = "cert_revoked"
    CERT_BAD_SIGNATURE = "cert_bad_signature"


@dataclass(frozen=True)
class Decision:
    action: Action
    reason: Reason
    detail: str = ""


# Mode-graded action for traffic we cannot vouch for but have no
# affirmative reason to kill: warn through, ask, or block.
_GRADED = {
    GatewayMode.PERMISSIVE: Action.FORWARD_WITH_WARNING,
    GatewayMode.PROMPT: Action.NEEDS_CONSENT,
    GatewayMode.STRICT: Action.BLOCK,
}

# Certificate states that put a server on the unattested path.  Expired
# and not-yet-valid certificates carry no current assurance; an unknown
# authority carries none either.  None of them is affirmative evidence
# of compromise, which is what separates them from revoked or forged.
_UNATTESTED_STATES = {Verdict.EXPIRED, Verdict.NOT_YET_VALID, Verdict.UNKNOWN_AUTHORITY}


def authorize_message(
    cert_state: Verdict | None,
    classification: MethodClassification | None,
    mode: GatewayMode,
    capability_attested: bool = False,
) -> Decision:
    """Decision table for one message.

    ``cert_state`` is None when the server presented no certificate.
    ``classification`` is None for responses, which carry no method.
    ``capability_attested`` says whether the certificate lists the
    capability class the method exercises; it is only consulted when the
    method needs one and the certificate verified as Valid or StaleCrl.
    """
    if cert_state is Verdict.REVOKED:
        return Decision(Action.BLOCK, Reason.CERT_REVOKED,
                        "certificate serial is revoked")
    if cert_state is Verdict.BAD_SIGNATURE:
        return Decision(Action.BLOCK, Reason.CERT_BAD_SIGNATURE,
                        "certificate signature does not verify")
    if cert_state is None or cert_state in _UNATTESTED_STATES:
        detail = "no certificate presented" if cert_state is None else (
            f"certificate state: {cert_state.value}"
        )
        return Decision(_GRADED[mode], Reason.UNATTESTED, detail)

    # Valid or StaleCrl from here on.
    assert cert_state in (Verdict.VALID, Verdict.STALE_CRL)
    stale = cert_state is Verdict.STALE_CRL

    if classification is None:
        if stale:
            return Decision(_GRADED[mode], Reason.STALE_CRL,
                            "revocation list is past its next_update")
        return Decision(Action.FORWARD, Reason.RESPONSE)

    if classification.known and classification.capability is not None:
        if not capability_attested:
            # The one all-mode hard block for attested servers: claimed
            # capability outside the certificate.
            return Decision(
                Action.BLOCK,
                Reason.CAPABILITY_VIOLATION,
                f"certificate does not attest {classification.capability.value}",
            )
        if stale:
            return Decision(_GRADED[mode], Reason.STALE_CRL,
                            "revocation list is past its next_update")
        return Decision(Action.FORWARD, Reason.ATTESTED)

    if classification.known:
        if stale:
            return Decision(_GRADED[mode], Reason.STALE_CRL,
                            "revocation list is past its next_update")
        return Decision(Action.FORWARD, Reason.NEUTRAL_METHOD)

    # Unknown method: graded in every certificate state that reaches it.
    return Decision(_GRADED[mode], Reason.UNKNOWN_METHOD,
                    "method is outside the known protocol surface")


def tag_sampling(msg: RpcMessage, server_id: str) -> RpcMessage:
    """Stamp server origin onto every content item of a sampling request.

    Each entry of ``params.messages`` gets an ``mcpsec_origin`` member
    naming the server the request came through.  Inbound annotations are
    overwritten, so a server cannot pre-label its own content as user
    input.  Requests with no content items pass through unchanged.
    """
    if msg.method != "sampling/createMessage":
        return msg
    params = msg.params
    if not isinstance(params, dict):
        return msg
    items = params.get("messages")
    if not isinstance(items, list) or not items:
        return msg
    new_params = copy.deepcopy(params)
    for item in new_params["messages"]:
        if isinstance(item, dict):
            item[ORIGIN_KEY] = {"origin": "server", "server_id": server_id}
    return replace(msg, params=new_params)


@dataclass(frozen=True)
class TaintLabel:
    """Provenance of the host's working context: which servers have
    contributed to it, and whether the user has."""

    origins: frozenset[str] = frozenset()
    includes_user: bool = False

    def union(self, other: "TaintLabel") -> "TaintLabel":
        return TaintLabel(
            origins=self.origins | other.origins,
            includes_user=self.includes_user or other.includes_user,
        )

    def with_server(self, server_id: str) -> "TaintLabel":
        return TaintLabel(origins=self.origins | {server_id},
                          includes_user=self.includes_user)

    def with_user(self) -> "TaintLabel":
        return TaintLabel(origins=self.origins, includes_user=True)


class TaintTracker:
    """Conservative global taint: any server whose output the host has
    seen is assumed to influence everything the host does afterwards."""

    def __init__(self):
        self._label = TaintLabel()

    def record_server_to_host(self, server_id: str) -> None:
        self._label = self._label.with_server(server_id)

    def record_user_input(self) -> None:
        self._label = self._label.with_user()

    def current(self) -> TaintLabel:
        return self._label


class FlowDecision(Enum):
    ALLOW = "allow"
    DENY = "deny"
    NEEDS_CONSENT = "needs_consent"


@dataclass(frozen=True)
class FlowVerdict:
    decision: FlowDecision
    # (source server, destination server) pairs the flow would realize
    cross_pairs: frozenset[tuple[str, str]] = frozenset()


def cross_pairs(label: TaintLabel, destination: str) -> frozenset[tuple[str, str]]:
    return frozenset(
        (src, destination) for src in label.origins if src != destination
    )


def evaluate_flow(
    label: TaintLabel,
    destination: str,
    level: IsolationLevel,
    granted: frozenset[tuple[str, str]] = frozenset(),
) -> FlowVerdict:
    """Gate a host-to-server message against the isolation level.

    A cross-server flow exists when the context is tainted by any server
    other than the destination.  Strict denies those outright; prompted
    allows them only when the session already covers every pair.
    """
    pairs = cross_pairs(label, destination)
    if not pairs:
        return FlowVerdict(FlowDecision.ALLOW)
    if level is IsolationLevel.NONE:
        return FlowVerdict(FlowDecision.ALLOW, pairs)
    if level is IsolationLevel.STRICT:
        return FlowVerdict(FlowDecision.DENY, pairs)
    if pairs <= granted:
        return FlowVerdict(FlowDecision.ALLOW, pairs)
    return FlowVerdict(FlowDecision.NEEDS_CONSENT, pairs)


class SessionGrants:
    """Cross-flow pairs the operator has approved for this session."""

    def __init__(self):
        self._pairs: set[tuple[str, str]] = set()

    def grant(self, pairs: frozenset[tuple[str, str]]) -> None:
        self._pairs |= pairs

    def covers(self, pairs: frozenset[tuple[str, str]]) -> bool:
        return pairs <= self._pairs

    def as_frozenset(self) -> frozenset[tuple[str, str]]:
        return frozenset(self._pairs)


class ConsentState(Enum):
    PENDING = "pending"
    ALLOWED = "allowed"
    DENIED = "denied"


class ConsentScope(Enum):
    ONCE = "once"
    SESSION = "session"


class DecisionConflict(Exception):
    """A consent request already has a different terminal decision."""


@dataclass
class PendingConsent:
    consent_id: str
    kind: str                       # "flow" or "message"
    detail: dict[str, Any]
    cross_pairs: frozenset[tuple[str, str]]
    created_at: float
    state: ConsentState = ConsentState.PENDING
    scope: ConsentScope | None = None
    decided_at: float | None = None

    def to_obj(self) -> dict[str, Any]:
        return {
            "consent_id": self.consent_id,
            "kind": self.kind,
            "detail": self.detail,
            "cross_pairs": sorted([list(p) for p in self.cross_pairs]),
            "created_at": self.created_at,
            "state": self.state.value,
        }


class ConsentBroker:
    """Pending approvals with a fail-closed timeout.

    A request left undecided for :data:`CONSENT_TIMEOUT` seconds resolves
    to denied.  Decisions are idempotent: repeating the same decision is
    a no-op, contradicting a terminal decision raises
    :class:`DecisionConflict`.
    """

    def __init__(self, grants: SessionGrants | None = None,
                 timeout: float = CONSENT_TIMEOUT,
                 id_source: Any = None):
        self.grants = grants if grants is not None else SessionGrants()
        self.timeout = timeout
        self._id_source = id_source if id_source is not None else (
            lambda: secrets.token_hex(8)
        )
        self._pending: dict[str, PendingConsent] = {}

    def submit(
        self,
        kind: str,
        detail: dict[str, Any],
        pairs: frozenset[tuple[str, str]],
        now: float,
    ) -> PendingConsent:
        consent_id = self._id_source()
        entry = PendingConsent(
            consent_id=consent_id, kind=kind, detail=detail,
            cross_pairs=pairs, created_at=now,
        )
        self._pending[consent_id] = entry
        return entry

    def _apply_timeout(self, entry: PendingConsent, now: float) -> None:
        if entry.state is ConsentState.PENDING and now - entry.created_at > self.timeout:
            entry.state = ConsentState.DENIED
            entry.decided_at = entry.created_at + self.timeout

    def poll(self, consent_id: str, now: float) -> ConsentState:
        entry = self._pending[consent_id]
        self._apply_timeout(entry, now)
        return entry.state

    def pending(self, now: float) -> list[PendingConsent]:
        for entry in self._pending.values():
            self._apply_timeout(entry, now)
        return [e for e in self._pending.values() if e.state is ConsentState.PENDING]

    def get(self, consent_id: str) -> PendingConsent | None:
        return self._pending.get(consent_id)

    def decide(
        self,
        consent_id: str,
        allow: bool,
        now: float,
        scope: ConsentScope = ConsentScope.ONCE,
    ) -> PendingConsent:
        entry = self._pending.get(consent_id)
        if entry is None:
            raise KeyError(consent_id)
        self._apply_timeout(entry, now)
        target = ConsentState.ALLOWED if allow else ConsentState.DENIED
        if entry.state is not ConsentState.PENDING:
            if entry.state is target:
                return entry               # idempotent repeat
            raise DecisionConflict(
                f"consent {consent_id} already {entry.state.value}"
            )
        entry.state = target
        entry.scope = scope
        entry.decided_at = now
        if allow and scope is ConsentScope.SESSION and entry.cross_pairs:
            self.grants.grant(entry.cross_pairs)
        return entry


def all_decision_rows() -> list[tuple[Verdict | None, MethodClassification | None, bool]]:
    """Every (certificate state, classification, capability attested)
    row the table distinguishes; used by exhaustiveness tests."""
    states: list[Verdict | None] = [None, *Verdict]
    classifications: list[MethodClassification | None] = [
        None,
        MethodClassification(known=True, capability=None),
        MethodClassification(known=False, capability=None),
    ]
    for cap in CapabilityClass:
        classifications.append(MethodClassification(known=True, capability=cap))
    rows = []
    for state, cls in itertools.product(states, classifications):
        if cls is not None and cls.capability is not None:
            rows.append((state, cls, True))
            rows.append((state, cls, False))
        else:
            rows.append((state, cls, False))
    return rows
