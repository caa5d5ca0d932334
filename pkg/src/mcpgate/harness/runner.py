"""Scenario execution against a real gateway core.

Each run gets its own gateway, authority, and actors; mock-server
steps are scheduled deterministically, consent prompts are auto-
decided per configuration, and every delivery is transcribed so the
compromise predicate and post-hoc scans work from observable facts
alone.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..attestation import AttestationVerifier, TrustStore
from ..authority import build_certificate, generate_authority_key, generate_server_identity
from ..channel import SeededNonceSource, establish_session, seal_message
from ..core import HOST, GatewayConfig, GatewayCore, PipelineResult
from ..messages import ORIGIN_KEY, RpcMessage
from ..policy import ConsentBroker, ConsentScope, GatewayMode, IsolationLevel
from .actors import MockHost, MockServer
from .scenario import ScenarioSpec, evaluate_predicate

T0 = 1_706_140_800.0
STEP_BUDGET = 500
AUDIT_EXCERPT_TYPES = ("message_blocked", "auth_failure", "warning",
                       "consent_requested", "consent_decided")

# Pipeline stages named by the operation that stopped the message.
_STAGE_NAMES = {
    "authorization": "authorize_message",
    "isolation": "evaluate_flow",
    "channel_auth": "verify_message",
    "consent": "consent",
    "routing": "route",
}


class Deadlock(Exception):
    """The scenario exceeded its step budget; a harness failure, never
    counted as a compromise."""


@dataclass(frozen=True)
class HarnessConfig:
    name: str
    mode: GatewayMode = GatewayMode.STRICT
    isolation: IsolationLevel = IsolationLevel.NONE
    attestation: bool = True
    consent: str = "auto_deny"            # auto_allow | auto_deny
    oracle: str = "naive"                 # naive | compliant

    def __post_init__(self) -> None:
        assert self.consent in ("auto_allow", "auto_deny")
        assert self.oracle in ("naive", "compliant")

    def to_obj(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "mode": self.mode.value,
            "isolation": self.isolation.value,
            "attestation": self.attestation,
            "consent": self.consent,
            "oracle": self.oracle,
        }

    @staticmethod
    def from_obj(obj: dict[str, Any]) -> "HarnessConfig":
        return HarnessConfig(
            name=obj["name"],
            mode=GatewayMode(obj.get("mode", "strict")),
            isolation=IsolationLevel(obj.get("isolation", "none")),
            attestation=bool(obj.get("attestation", True)),
            consent=obj.get("consent", "auto_deny"),
            oracle=obj.get("oracle", "naive"),
        )


@dataclass
class RunResult:
    scenario_id: str
    vuln_class: str
    config: HarnessConfig
    status: str                           # ok | failed
    compromised: bool
    blocked_at: str | None
    failure: str | None = None
    steps: int = 0
    deliveries: list[tuple[str, dict[str, Any]]] = field(default_factory=list)
    host_context: list[str] = field(default_factory=list)
    audit_excerpt: list[dict[str, Any]] = field(default_factory=list)

    def to_obj(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "vuln_class": self.vuln_class,
            "config": self.config.to_obj(),
            "status": self.status,
            "compromised": self.compromised,
            "blocked_at": self.blocked_at,
            "failure": self.failure,
            "steps": self.steps,
            "audit_excerpt": self.audit_excerpt,
        }


class _ManualClock:
    def __init__(self, start: float):
        self._now = start

    def __call__(self) -> float:
        return self._now

    def advance(self, delta: float) -> None:
        self._now += delta


def server_seed(server_id: str) -> int:
    return int.from_bytes(hashlib.sha256(server_id.encode()).digest()[:4], "big")


class _ScenarioRun:
    def __init__(self, spec: ScenarioSpec, config: HarnessConfig,
                 step_budget: int = STEP_BUDGET):
        self.spec = spec
        self.config = config
        self.budget = step_budget
        self.clock = _ManualClock(T0)
        self.steps = 0
        self.blocked_at: str | None = None
        self.deliveries: list[tuple[str, dict[str, Any]]] = []
        self._delivered_text: dict[str, list[str]] = {}
        self._queue: deque = deque()

        ca = generate_authority_key("harness-ca")
        store = TrustStore(roots={"harness-ca": ca.public_bytes}, cross_signatures=[])
        verifier = AttestationVerifier(store)
        self.broker = ConsentBroker(
            id_source=iter(f"hc-{i}" for i in range(10_000)).__next__)
        self.core = GatewayCore(
            GatewayConfig(mode=config.mode, isolation=config.isolation,
                          attestation_enabled=config.attestation),
            verifier,
            broker=self.broker,
            clock=self.clock,
            nonce_source=SeededNonceSource(4242),
        )
        self.servers: dict[str, MockServer] = {}
        self._seal_state: dict[str, tuple[bytes, SeededNonceSource]] = {}
        for sspec in spec.servers:
            mock = MockServer(sspec)
            self.servers[sspec.server_id] = mock
            if config.attestation and sspec.attested:
                identity = generate_server_identity(sspec.server_id)
                cert = build_certificate(
                    ca, sspec.server_id, list(sspec.capabilities),
                    T0 - 3600, T0 + 86400, identity.public_bytes,
                )
                key, _ = establish_session(cert, identity.private_key)
                self.core.attach_server(sspec.server_id, cert=cert, session_key=key)
                self._seal_state[sspec.server_id] = (
                    key, SeededNonceSource(server_seed(sspec.server_id)))
            else:
                self.core.attach_server(sspec.server_id)
        self.host = MockHost(config.oracle)

    # ------------------------------------------------------------------

    def run(self) -> None:
        for turn in self.spec.agent_script:
            kind = turn["turn"]
            if kind == "note":
                self.core.record_user_input()
                self.host.add_user_note(turn["text"])
            else:
                for msg in self.host.start_turn(turn):
                    self._queue.append(("host", None, msg))
            self._pump()
            self._flush_servers()
        self._flush_servers()             # trailing emissions after the last turn

    def _flush_servers(self) -> None:
        for sspec in self.spec.servers:
            for msg in self.servers[sspec.server_id].flush():
                self._queue.append(("server", sspec.server_id, msg))
        self._pump()

    def _pump(self) -> None:
        while self._queue:
            self.steps += 1
            if self.steps > self.budget:
                raise Deadlock(
                    f"{self.spec.scenario_id}: exceeded {self.budget} steps")
            self.clock.advance(0.005)
            origin, server_id, msg = self._queue.popleft()
            if origin == "host":
                result = self.core.process_host_message(msg)
            else:
                result = self.core.process_server_message(
                    server_id, self._seal_outbound(server_id, msg))
            self._handle(result)

    def _seal_outbound(self, server_id: str, msg: RpcMessage) -> RpcMessage:
        sealing = self._seal_state.get(server_id)
        if sealing is None:
            return msg
        key, nonces = sealing
        return seal_message(msg, key, server_id, clock=self.clock,
                            nonce_source=nonces)

    def _handle(self, result: PipelineResult | None) -> None:
        if result is None:
            return
        if result.status == "pending":
            allow = self.config.consent == "auto_allow"
            self.broker.decide(result.consent_id, allow=allow,
                               now=self.clock(), scope=ConsentScope.ONCE)
            self._handle(self.core.resolve_consent(result.consent_id))
            return
        if result.status in ("blocked", "dropped") and self.blocked_at is None:
            self.blocked_at = _STAGE_NAMES.get(result.stage, result.stage)
        for dest, msg in result.deliveries:
            wire = msg.to_obj()
            self.deliveries.append((dest, wire))
            self._delivered_text.setdefault(dest, []).append(
                json.dumps(wire, ensure_ascii=False))
            if dest == HOST:
                for out in self.host.receive(msg):
                    self._queue.append(("host", None, out))
            elif dest in self.servers:
                for out in self.servers[dest].receive(msg):
                    self._queue.append(("server", dest, out))

    # ------------------------------------------------------------------

    def result(self) -> RunResult:
        compromised = evaluate_predicate(
            self.spec.compromise_predicate, self._delivered_text, self.host.context)
        return RunResult(
            scenario_id=self.spec.scenario_id,
            vuln_class=self.spec.vuln_class,
            config=self.config,
            status="ok",
            compromised=compromised,
            blocked_at=self.blocked_at,
            steps=self.steps,
            deliveries=self.deliveries,
            host_context=list(self.host.context),
            audit_excerpt=[e for e in self.core.audit.all_events()
                           if e["type"] in AUDIT_EXCERPT_TYPES],
        )


def run_scenario(spec: ScenarioSpec, config: HarnessConfig,
                 step_budget: int = STEP_BUDGET) -> RunResult:
    """Execute one scenario; a watchdog overrun reports as a failure,
    never as a compromise."""
    run = _ScenarioRun(spec, config, step_budget)
    try:
        run.run()
    except Deadlock as exc:
        return RunResult(
            scenario_id=spec.scenario_id,
            vuln_class=spec.vuln_class,
            config=config,
            status="failed",
            compromised=False,
            blocked_at=None,
            failure=str(exc),
            steps=run.steps,
        )
    return run.result()


@dataclass
class SuiteReport:
    results: list[RunResult]

    def configs(self) -> list[HarnessConfig]:
        seen: dict[str, HarnessConfig] = {}
        for r in self.results:
            seen.setdefault(r.config.name, r.config)
        return list(seen.values())

    def classes(self) -> list[str]:
        return sorted({r.vuln_class for r in self.results})

    def bucket(self, vuln_class: str, config_name: str) -> list[RunResult]:
        return [r for r in self.results
                if r.vuln_class == vuln_class and r.config.name == config_name]

    def asr(self, vuln_class: str, config_name: str) -> float | None:
        """Fraction of OK runs whose compromise predicate held."""
        runs = [r for r in self.bucket(vuln_class, config_name)
                if r.status == "ok"]
        if not runs:
            return None
        return sum(1 for r in runs if r.compromised) / len(runs)

    def failures(self) -> list[RunResult]:
        return [r for r in self.results if r.status == "failed"]

    def to_obj(self) -> dict[str, Any]:
        aggregate = []
        for config in self.configs():
            per_class = {}
            for vuln_class in self.classes():
                runs = self.bucket(vuln_class, config.name)
                ok = [r for r in runs if r.status == "ok"]
                per_class[vuln_class] = {
                    "total": len(runs),
                    "ok": len(ok),
                    "failed": len(runs) - len(ok),
                    "compromised": sum(1 for r in ok if r.compromised),
                    "asr": self.asr(vuln_class, config.name),
                }
            aggregate.append({"config": config.to_obj(), "by_class": per_class})
        return {
            "aggregate": aggregate,
            "runs": [r.to_obj() for r in self.results],
        }


def run_suite(suite: Sequence[ScenarioSpec],
              configurations: Sequence[HarnessConfig],
              step_budget: int = STEP_BUDGET) -> SuiteReport:
    """Cross-product execution of scenarios by configurations."""
    results = [run_scenario(spec, config, step_budget)
               for config in configurations for spec in suite]
    return SuiteReport(results=results)


def format_report(report: SuiteReport) -> str:
    """Attack-success table: one row per vulnerability class, one
    column per configuration, plus percentage-point reduction when
    exactly two configurations are compared."""
    configs = report.configs()
    classes = report.classes()
    if not configs or not classes:
        return "no runs"
    headers = ["Attack class"] + [c.name for c in configs]
    two_way = len(configs) == 2
    if two_way:
        headers.append("Reduction")
    rows = []
    for vuln_class in classes:
        row = [vuln_class]
        values = []
        for config in configs:
            asr = report.asr(vuln_class, config.name)
            runs = [r for r in report.bucket(vuln_class, config.name)
                    if r.status == "ok"]
            hit = sum(1 for r in runs if r.compromised)
            if asr is None:
                row.append("-")
                values.append(None)
            else:
                row.append(f"{asr * 100:5.1f}% ({hit}/{len(runs)})")
                values.append(asr)
        if two_way:
            if values[0] is None or values[1] is None:
                row.append("-")
            else:
                row.append(f"{(values[0] - values[1]) * 100:+.1f} pp")
        rows.append(row)
    widths = [max(len(str(r[i])) for r in [headers] + rows)
              for i in range(len(headers))]
    lines = ["  ".join(str(headers[i]).ljust(widths[i]) for i in range(len(headers)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(row[i]).ljust(widths[i]) for i in range(len(row))))
    failures = report.failures()
    if failures:
        lines.append("")
        lines.append(f"harness failures: {len(failures)}")
        for r in failures:
            lines.append(f"  {r.scenario_id} [{r.config.name}]: {r.failure}")
    return "\n".join(lines)


def scan_untagged_sampling(results: Iterable[RunResult]) -> list[dict[str, Any]]:
    """Find sampling content items forwarded to the host without a
    server origin tag, across runs where the tagging defense was
    active.  A clean defense returns an empty list."""
    offenders = []
    for result in results:
        if not result.config.attestation:
            continue
        for dest, wire in result.deliveries:
            if dest != HOST or wire.get("method") != "sampling/createMessage":
                continue
            params = wire.get("params")
            items = params.get("messages", []) if isinstance(params, dict) else []
            for position, item in enumerate(items):
                if not isinstance(item, dict):
                    continue
                tag = item.get(ORIGIN_KEY)
                if not (isinstance(tag, dict) and tag.get("origin") == "server"):
                    offenders.append({
                        "scenario_id": result.scenario_id,
                        "config": result.config.name,
                        "position": position,
                        "item": item,
                    })
    return offenders
