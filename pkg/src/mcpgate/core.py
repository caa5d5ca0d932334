"""The gateway pipeline.

:class:`GatewayCore` is synchronous and deterministic: messages go in,
effects come out, and nothing here spawns a thread, touches a socket or
reads a wall clock it was not handed.  The live process wraps this core
in transports; the attack harness drives it directly.  Both therefore
exercise exactly the same enforcement path.

Pipeline, host to server:  route, authorize, isolation gate, consent,
seal, deliver.  Server to host:  channel verification, authorize,
sampling origin tagging, taint recording, deliver.  Blocked requests are
answered with synthesized JSON-RPC errors so neither side hangs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .attestation import AttestationVerifier, CapabilityCert, Verdict
from .audit import AuditLog
from .channel import (
    NonceWindow,
    PinOutcome,
    PinStore,
    VerifyOutcome,
    seal_message,
    system_nonce_source,
    verify_message,
)
from .messages import (
    ABSENT,
    ERROR_AUTH_FAILED,
    ERROR_BLOCKED_POLICY,
    ERROR_CAPABILITY_VIOLATION,
    ERROR_CONSENT_DENIED,
    ERROR_ISOLATION_DENIED,
    MessageKind,
    ROUTE_KEY,
    RpcMessage,
    classify_method,
    make_error_response,
)
from .policy import (
    Action,
    ConsentBroker,
    ConsentScope,
    ConsentState,
    Decision,
    FlowDecision,
    GatewayMode,
    IsolationLevel,
    Reason,
    TaintTracker,
    authorize_message,
    evaluate_flow,
    tag_sampling,
)

HOST = "host"

_BLOCK_CODES = {
    Reason.CAPABILITY_VIOLATION: ERROR_CAPABILITY_VIOLATION,
    Reason.CERT_REVOKED: ERROR_AUTH_FAILED,
    Reason.CERT_BAD_SIGNATURE: ERROR_AUTH_FAILED,
    Reason.UNATTESTED: ERROR_BLOCKED_POLICY,
    Reason.UNKNOWN_METHOD: ERROR_BLOCKED_POLICY,
    Reason.STALE_CRL: ERROR_BLOCKED_POLICY,
}


@dataclass
class GatewayConfig:
    mode: GatewayMode = GatewayMode.STRICT
    isolation: IsolationLevel = IsolationLevel.NONE
    # Master switch for the attestation/authentication/tagging pipeline;
    # exists so the harness can measure the undefended baseline.
    attestation_enabled: bool = True


@dataclass
class ServerState:
    server_id: str
    cert: CapabilityCert | None = None
    session_key: bytes | None = None
    window: NonceWindow = field(default_factory=NonceWindow)
    attached_at: float = 0.0
    pin_outcome: PinOutcome | None = None
    forwarded_to: int = 0
    forwarded_from: int = 0
    blocked: int = 0


@dataclass
class PipelineResult:
    """Effects of pushing one message through the pipeline."""

    status: str                      # forwarded | blocked | dropped | pending
    deliveries: list[tuple[str, RpcMessage]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stage: str | None = None         # where a block/drop happened
    reason: str | None = None
    consent_id: str | None = None


@dataclass
class _ParkedMessage:
    consent_id: str
    direction: str                   # "host_to_server" | "server_to_host"
    server_id: str
    message: RpcMessage
    warnings: list[str]
    flow_pairs: frozenset[tuple[str, str]]


class GatewayCore:
    def __init__(
        self,
        config: GatewayConfig,
        verifier: AttestationVerifier,
        pin_store: PinStore | None = None,
        audit: AuditLog | None = None,
        broker: ConsentBroker | None = None,
        clock: Callable[[], float] = time.time,
        nonce_source: Callable[[], bytes] = system_nonce_source,
    ):
        self.config = config
        self.verifier = verifier
        self.pin_store = pin_store if pin_store is not None else PinStore(None)
        self.audit = audit if audit is not None else AuditLog(None, clock=clock)
        self.broker = broker
        self.clock = clock
        self.nonce_source = nonce_source
        self.taint = TaintTracker()
        self.servers: dict[str, ServerState] = {}
        # rewritten request id -> (server_id, original id)
        self._server_requests: dict[str, tuple[str, Any]] = {}
        self._parked: dict[str, _ParkedMessage] = {}
        self.audit.emit(
            "gateway_started",
            mode=config.mode.value,
            isolation=config.isolation.value,
            attestation=config.attestation_enabled,
        )

    # ------------------------------------------------------------------
    # Server lifecycle

    def attach_server(
        self,
        server_id: str,
        cert: CapabilityCert | None = None,
        session_key: bytes | None = None,
    ) -> ServerState:
        """Register a server connection after transport setup.

        ``cert`` and ``session_key`` come from the handshake; both are
        None for a server that connected without credentials.  The pin
        store sees every attach, so reconnecting without credentials
        after an authenticated history raises a downgrade event here.
        """
        now = self.clock()
        verdict = self.verifier.verify(cert, now) if cert is not None else None
        attested = verdict in (Verdict.VALID, Verdict.STALE_CRL)
        fingerprint = cert.fingerprint() if (cert is not None and attested) else None

        state = ServerState(
            server_id=server_id,
            cert=cert,
            session_key=session_key,
            attached_at=now,
        )
        if self.config.attestation_enabled:
            previous = self.pin_store.get(server_id)
            outcome = self.pin_store.observe(server_id, attested, fingerprint, now)
            state.pin_outcome = outcome
            if outcome is PinOutcome.FIRST_CONTACT:
                self.audit.emit("pin_first_contact", server_id=server_id, attested=attested)
            elif outcome is PinOutcome.DOWNGRADE_DETECTED:
                self.audit.emit(
                    "warning",
                    server_id=server_id,
                    code="downgrade_detected",
                    elevated=True,
                    detail="server previously authenticated, now presents no credentials",
                )
            elif outcome is PinOutcome.FINGERPRINT_CHANGED:
                self.audit.emit(
                    "warning",
                    server_id=server_id,
                    code="fingerprint_changed",
                    elevated=True,
                    detail="attested certificate differs from the pinned one",
                    pinned=previous.fingerprint if previous else None,
                    observed=fingerprint,
                )
        self.servers[server_id] = state
        self.audit.emit(
            "server_attached",
            server_id=server_id,
            attested=attested,
            verdict=verdict.value if verdict is not None else None,
            fingerprint=fingerprint,
            session=session_key is not None,
        )
        return state

    def detach_server(self, server_id: str) -> None:
        self.servers.pop(server_id, None)
        self.audit.emit("server_detached", server_id=server_id)

    def record_user_input(self) -> None:
        self.taint.record_user_input()

    # ------------------------------------------------------------------
    # Host -> server

    def process_host_message(self, msg: RpcMessage) -> PipelineResult:
        server_id, msg, route_error = self._route_host_message(msg)
        if route_error is not None:
            return route_error
        state = self.servers[server_id]

        decision: Decision | None = None
        warnings: list[str] = []
        if self.config.attestation_enabled:
            verdict = (
                self.verifier.verify(state.cert, self.clock())
                if state.cert is not None
                else None
            )
            classification = (
                classify_method(msg.method) if msg.method is not None else None
            )
            capability_ok = bool(
                state.cert is not None
                and classification is not None
                and classification.capability is not None
                and state.cert.has_capability(classification.capability)
            )
            decision = authorize_message(
                verdict, classification, self.config.mode, capability_ok
            )
            if decision.action is Action.BLOCK:
                return self._block(
                    "host_to_server", state, msg, stage="authorization",
                    decision=decision,
                )

        flow = evaluate_flow(
            self.taint.current(),
            server_id,
            self.config.isolation,
            self.broker.grants.as_frozenset() if self.broker is not None else frozenset(),
        )
        if flow.decision is FlowDecision.DENY:
            return self._block(
                "host_to_server",
                state,
                msg,
                stage="isolation",
                decision=Decision(Action.BLOCK, Reason.UNATTESTED,
                                  "cross-server flow denied"),
                code=ERROR_ISOLATION_DENIED,
                reason_label="isolation_denied",
                flow_pairs=flow.cross_pairs,
            )

        if decision is not None and decision.action is Action.FORWARD_WITH_WARNING:
            warnings.append(decision.reason.value)
            self.audit.emit(
                "warning",
                server_id=server_id,
                code=decision.reason.value,
                elevated=False,
                detail=decision.detail,
            )

        needs_consent = (
            decision is not None and decision.action is Action.NEEDS_CONSENT
        ) or flow.decision is FlowDecision.NEEDS_CONSENT
        if needs_consent:
            consent_basis = decision if (
                decision is not None and decision.action is Action.NEEDS_CONSENT
            ) else Decision(Action.NEEDS_CONSENT, Reason.UNATTESTED,
                            "cross-server flow needs approval")
            return self._request_consent(
                "host_to_server", state, msg, warnings, consent_basis, flow.cross_pairs
            )
        return self._forward_to_server(state, msg, warnings, flow.cross_pairs)

    def _route_host_message(
        self, msg: RpcMessage
    ) -> tuple[str, RpcMessage, PipelineResult | None]:
        """Find the destination server; strip routing metadata."""
        if msg.kind is MessageKind.RESPONSE:
            key = msg.id if isinstance(msg.id, str) else None
            entry = self._server_requests.pop(key, None) if key is not None else None
            if entry is None:
                self.audit.emit("message_dropped", direction="host_to_server",
                                reason="unroutable_response", id=msg.id)
                return "", msg, PipelineResult(
                    status="dropped", stage="routing", reason="unroutable_response"
                )
            server_id, original_id = entry
            msg = replace(msg, id=original_id)
            return server_id, msg, None

        route = None
        if isinstance(msg.params, dict) and ROUTE_KEY in msg.params:
            params = dict(msg.params)
            route = params.pop(ROUTE_KEY)
            msg = replace(msg, params=params if params else ABSENT)
        if route is None and len(self.servers) == 1:
            route = next(iter(self.servers))
        if not isinstance(route, str) or route not in self.servers:
            self.audit.emit("message_dropped", direction="host_to_server",
                            reason="unroutable", route=route, method=msg.method)
            result = PipelineResult(status="dropped", stage="routing", reason="unroutable")
            if msg.kind is MessageKind.REQUEST:
                result.deliveries.append(
                    (HOST, make_error_response(
                        msg.id, ERROR_BLOCKED_POLICY, "no such server",
                        data={"route": route},
                    ))
                )
            return "", msg, result
        return route, msg, None

    def _forward_to_server(
        self,
        state: ServerState,
        msg: RpcMessage,
        warnings: list[str],
        flow_pairs: frozenset[tuple[str, str]],
    ) -> PipelineResult:
        outbound = msg
        if state.session_key is not None and self.config.attestation_enabled:
            outbound = seal_message(
                msg,
                state.session_key,
                state.server_id,
                clock=self.clock,
                nonce_source=self.nonce_source,
            )
        state.forwarded_to += 1
        self.audit.emit(
            "message_forwarded",
            direction="host_to_server",
            server_id=state.server_id,
            kind=msg.kind.value,
            method=msg.method,
            id=None if msg.id is ABSENT else msg.id,
            taint_origins=sorted(self.taint.current().origins),
            flow_pairs=sorted([list(p) for p in flow_pairs]),
            warnings=warnings,
        )
        return PipelineResult(
            status="forwarded",
            deliveries=[(state.server_id, outbound)],
            warnings=warnings,
        )

    # ------------------------------------------------------------------
    # Server -> host

    def process_server_message(self, server_id: str, msg: RpcMessage) -> PipelineResult:
        state = self.servers.get(server_id)
        if state is None:
            return PipelineResult(status="dropped", stage="routing", reason="unknown_server")

        if not self.config.attestation_enabled:
            return self._forward_to_host(state, msg)

        if state.session_key is not None:
            outcome = verify_message(
                msg,
                state.session_key,
                state.window,
                clock=self.clock,
                expected_server_id=server_id,
            )
            if outcome is not VerifyOutcome.OK:
                state.blocked += 1
                self.audit.emit(
                    "auth_failure",
                    server_id=server_id,
                    outcome=outcome.value,
                    kind=msg.kind.value,
                    method=msg.method,
                )
                # Unauthenticated traffic gets no protocol-level reply;
                # answering would hand an attacker a verification oracle.
                return PipelineResult(
                    status="dropped", stage="channel_auth", reason=outcome.value
                )
        elif msg.has_envelope:
            # Envelope without an established session cannot be checked;
            # treat as unsigned and do not forward attacker-controlled
            # envelope bytes to the host.
            msg = replace(msg, envelope=None, envelope_raw=ABSENT)

        verdict = (
            self.verifier.verify(state.cert, self.clock())
            if state.cert is not None
            else None
        )
        classification = classify_method(msg.method) if msg.method is not None else None
        capability_ok = bool(
            state.cert is not None
            and classification is not None
            and classification.capability is not None
            and state.cert.has_capability(classification.capability)
        )
        decision = authorize_message(
            verdict, classification, self.config.mode, capability_ok
        )
        if decision.action is Action.BLOCK:
            return self._block(
                "server_to_host", state, msg, stage="authorization", decision=decision
            )

        warnings = []
        if decision.action is Action.FORWARD_WITH_WARNING:
            warnings.append(decision.reason.value)
            self.audit.emit(
                "warning",
                server_id=server_id,
                code=decision.reason.value,
                elevated=False,
                detail=decision.detail,
            )
        if decision.action is Action.NEEDS_CONSENT:
            return self._request_consent(
                "server_to_host", state, msg, warnings, decision, frozenset()
            )
        return self._forward_to_host(state, msg, warnings)

    def _rewrite_server_ids(self, state: ServerState, msg: RpcMessage) -> RpcMessage:
        if msg.kind is MessageKind.REQUEST:
            rewritten = f"{state.server_id}:{msg.id}"
            self._server_requests[rewritten] = (state.server_id, msg.id)
            return replace(msg, id=rewritten)
        return msg

    def _forward_to_host(
        self, state: ServerState, msg: RpcMessage, warnings: list[str] | None = None
    ) -> PipelineResult:
        warnings = warnings or []
        if self.config.attestation_enabled:
            msg = tag_sampling(msg, state.server_id)
        # Request ids are namespaced by server in both modes: routing
        # bookkeeping, not a defense.
        msg = self._rewrite_server_ids(state, msg)
        # The host side of the channel is local; the envelope has done
        # its job by now.
        if msg.has_envelope:
            msg = replace(msg, envelope=None, envelope_raw=ABSENT)
        self.taint.record_server_to_host(state.server_id)
        state.forwarded_from += 1
        self.audit.emit(
            "message_forwarded",
            direction="server_to_host",
            server_id=state.server_id,
            kind=msg.kind.value,
            method=msg.method,
            id=None if msg.id is ABSENT else msg.id,
            taint_origins=sorted(self.taint.current().origins),
            flow_pairs=[],
            warnings=warnings,
        )
        return PipelineResult(
            status="forwarded", deliveries=[(HOST, msg)], warnings=warnings
        )

    # ------------------------------------------------------------------
    # Blocking, consent

    def _block(
        self,
        direction: str,
        state: ServerState,
        msg: RpcMessage,
        stage: str,
        decision: Decision,
        code: int | None = None,
        reason_label: str | None = None,
        flow_pairs: frozenset[tuple[str, str]] = frozenset(),
    ) -> PipelineResult:
        reason = reason_label or decision.reason.value
        state.blocked += 1
        self.audit.emit(
            "message_blocked",
            direction=direction,
            server_id=state.server_id,
            stage=stage,
            reason=reason,
            detail=decision.detail,
            kind=msg.kind.value,
            method=msg.method,
            id=None if msg.id is ABSENT else msg.id,
            flow_pairs=sorted([list(p) for p in flow_pairs]),
        )
        error_code = code if code is not None else _BLOCK_CODES.get(
            decision.reason, ERROR_BLOCKED_POLICY
        )
        result = PipelineResult(status="blocked", stage=stage, reason=reason)
        if msg.kind is MessageKind.REQUEST:
            error = make_error_response(
                msg.id, error_code, f"blocked by gateway: {reason}",
                data={"stage": stage},
            )
            if direction == "host_to_server":
                result.deliveries.append((HOST, error))
            else:
                result.deliveries.append(
                    (state.server_id, self._seal_for(state, error))
                )
        elif msg.kind is MessageKind.RESPONSE and direction == "host_to_server":
            # The server is still owed an answer for its request.
            error = make_error_response(
                msg.id, error_code, f"blocked by gateway: {reason}",
                data={"stage": stage},
            )
            result.deliveries.append((state.server_id, self._seal_for(state, error)))
        return result

    def _seal_for(self, state: ServerState, msg: RpcMessage) -> RpcMessage:
        if state.session_key is not None and self.config.attestation_enabled:
            return seal_message(
                msg, state.session_key, state.server_id,
                clock=self.clock, nonce_source=self.nonce_source,
            )
        return msg

    def _request_consent(
        self,
        direction: str,
        state: ServerState,
        msg: RpcMessage,
        warnings: list[str],
        decision: Decision,
        flow_pairs: frozenset[tuple[str, str]],
    ) -> PipelineResult:
        if self.broker is None:
            # No way to ask anyone.  Permissive keeps compatibility with
            # a warning; anything stricter fails closed.
            self.audit.emit(
                "warning",
                server_id=state.server_id,
                code="broker_unavailable",
                elevated=False,
                detail="consent needed but no broker is configured",
            )
            if self.config.mode is GatewayMode.PERMISSIVE:
                if direction == "host_to_server":
                    return self._forward_to_server(
                        state, msg, warnings + ["broker_unavailable"], flow_pairs
                    )
                return self._forward_to_host(
                    state, msg, warnings + ["broker_unavailable"]
                )
            return self._block(
                direction, state, msg, stage="consent", decision=decision,
                code=ERROR_CONSENT_DENIED, reason_label="broker_unavailable",
                flow_pairs=flow_pairs,
            )

        entry = self.broker.submit(
            kind="flow" if flow_pairs else "message",
            detail={
                "direction": direction,
                "server_id": state.server_id,
                "method": msg.method,
                "reason": decision.reason.value,
                "detail": decision.detail,
            },
            pairs=flow_pairs,
            now=self.clock(),
        )
        self._parked[entry.consent_id] = _ParkedMessage(
            consent_id=entry.consent_id,
            direction=direction,
            server_id=state.server_id,
            message=msg,
            warnings=warnings,
            flow_pairs=flow_pairs,
        )
        self.audit.emit(
            "consent_requested",
            consent_id=entry.consent_id,
            kind=entry.kind,
            server_id=state.server_id,
            method=msg.method,
            cross_pairs=sorted([list(p) for p in flow_pairs]),
            reason=decision.reason.value,
        )
        return PipelineResult(
            status="pending", consent_id=entry.consent_id, warnings=warnings
        )

    def resolve_consent(self, consent_id: str) -> PipelineResult | None:
        """Complete a parked message according to the broker's state for
        it.  Returns None while still pending."""
        parked = self._parked.get(consent_id)
        if parked is None or self.broker is None:
            return None
        consent_state = self.broker.poll(consent_id, self.clock())
        if consent_state is ConsentState.PENDING:
            return None
        del self._parked[consent_id]
        entry = self.broker.get(consent_id)
        self.audit.emit(
            "consent_decided",
            consent_id=consent_id,
            state=consent_state.value,
            scope=entry.scope.value if entry and entry.scope else None,
        )
        state = self.servers.get(parked.server_id)
        if state is None:
            return PipelineResult(status="dropped", stage="consent",
                                  reason="server_detached")
        if consent_state is ConsentState.ALLOWED:
            if parked.direction == "host_to_server":
                return self._forward_to_server(
                    state, parked.message, parked.warnings, parked.flow_pairs
                )
            return self._forward_to_host(state, parked.message, parked.warnings)
        return self._block(
            parked.direction,
            state,
            parked.message,
            stage="consent",
            decision=Decision(Action.BLOCK, Reason.UNATTESTED, "consent denied"),
            code=ERROR_CONSENT_DENIED,
            reason_label="consent_denied",
            flow_pairs=parked.flow_pairs,
        )

    def expire_consents(self) -> list[PipelineResult]:
        """Resolve every parked message whose consent timed out."""
        if self.broker is None:
            return []
        results = []
        for consent_id in list(self._parked):
            if self.broker.poll(consent_id, self.clock()) is not ConsentState.PENDING:
                result = self.resolve_consent(consent_id)
                if result is not None:
                    results.append(result)
        return results

    def pending_consents(self) -> list[dict[str, Any]]:
        if self.broker is None:
            return []
        out = []
        for entry in self.broker.pending(self.clock()):
            obj = entry.to_obj()
            # hoist the card-level fields an approval console shows
            for key in ("direction", "server_id", "method", "reason"):
                if key in entry.detail:
                    obj[key] = entry.detail[key]
            out.append(obj)
        return out

    # ------------------------------------------------------------------
    # Introspection for the control API

    def servers_snapshot(self) -> list[dict[str, Any]]:
        out = []
        for state in self.servers.values():
            verdict = (
                self.verifier.verify(state.cert, self.clock())
                if state.cert is not None
                else None
            )
            pin = self.pin_store.get(state.server_id)
            out.append(
                {
                    "server_id": state.server_id,
                    "attested": verdict in (Verdict.VALID, Verdict.STALE_CRL),
                    "verdict": verdict.value if verdict is not None else None,
                    "capabilities": list(state.cert.capabilities) if state.cert else [],
                    "fingerprint": state.cert.fingerprint() if state.cert else None,
                    "pinned": pin.to_obj() if pin is not None else None,
                    "session": state.session_key is not None,
                    "counters": {
                        "forwarded_to": state.forwarded_to,
                        "forwarded_from": state.forwarded_from,
                        "blocked": state.blocked,
                    },
                }
            )
        return sorted(out, key=lambda s: s["server_id"])
