"""Scenario execution over real stdio subprocesses.

The in-process runner is the deterministic workhorse; this module
re-runs a scenario with each mock server as an actual child process
bootstrapped over its pipes, validating that nothing about the harness
depends on in-process shortcuts.  Timing here is wall-clock, so
results are checked for outcome, not for step counts.

Mock servers log every frame they receive to a transcript file; the
parent evaluates the compromise predicate from those transcripts plus
its own view of host-bound deliveries.
"""

from __future__ import annotations

import base64
import json
import os
import sys
import tempfile
import time
from typing import Any

from ..attestation import TrustStore, AttestationVerifier
from ..authority import build_certificate, generate_authority_key, generate_server_identity
from ..control import GatewayApp
from ..core import GatewayConfig, GatewayCore
from ..messages import MalformedJson, ProtocolViolation, parse_message
from ..policy import ConsentBroker, ConsentScope
from ..transports import QueueTransport, SubprocessTransport, TransportClosed, TransportTimeout
from .actors import MockHost
from .runner import _STAGE_NAMES, HarnessConfig, RunResult
from .scenario import ScenarioSpec, evaluate_predicate

QUIET_POLLS = 4                           # consecutive empty polls = turn done
POLL_SECS = 0.15


def run_scenario_stdio(spec: ScenarioSpec, config: HarnessConfig,
                       total_timeout: float = 60.0) -> RunResult:
    """Run one scenario with subprocess servers; same result shape as
    the in-process runner."""
    deadline = time.monotonic() + total_timeout
    with tempfile.TemporaryDirectory(prefix="mcpgate-harness-") as workdir:
        return _run(spec, config, workdir, deadline)


def _run(spec: ScenarioSpec, config: HarnessConfig, workdir: str,
         deadline: float) -> RunResult:
    now = time.time()
    ca = generate_authority_key("harness-ca")
    store = TrustStore(roots={"harness-ca": ca.public_bytes}, cross_signatures=[])
    broker = ConsentBroker()
    core = GatewayCore(
        GatewayConfig(mode=config.mode, isolation=config.isolation,
                      attestation_enabled=config.attestation),
        AttestationVerifier(store),
        broker=broker,
    )
    app = GatewayApp(core)
    server_objs = {s["server_id"]: s for s in spec.to_obj()["servers"]}
    transcripts: dict[str, str] = {}

    try:
        for sspec in spec.servers:
            path = os.path.join(workdir, f"{sspec.server_id}.jsonl")
            transcripts[sspec.server_id] = path
            cfg: dict[str, Any] = {"server": server_objs[sspec.server_id],
                                   "transcript": path}
            if config.attestation and sspec.attested:
                identity = generate_server_identity(sspec.server_id)
                cert = build_certificate(
                    ca, sspec.server_id, list(sspec.capabilities),
                    now - 3600, now + 86400, identity.public_bytes,
                )
                cfg["identity_private"] = base64.b64encode(
                    identity.private_key.private_bytes_raw()).decode("ascii")
                cfg["capability_cert"] = cert.inner
            cfg_path = os.path.join(workdir, f"{sspec.server_id}.json")
            with open(cfg_path, "w", encoding="utf-8") as fh:
                json.dump(cfg, fh)
            transport = SubprocessTransport(
                [sys.executable, "-m", "mcpgate.harness.mockserv",
                 "--config", cfg_path])
            app.connect_server(sspec.server_id, transport)

        gateway_side, host_side = QueueTransport.pair()
        app.attach_host(gateway_side)
        host = MockHost(config.oracle)
        host_deliveries: list[dict[str, Any]] = []

        def send_all(msgs) -> None:
            for msg in msgs:
                host_side.send_obj(msg.to_obj())

        def drain() -> None:
            quiet = 0
            while quiet < QUIET_POLLS:
                if time.monotonic() > deadline:
                    raise TimeoutError(f"{spec.scenario_id}: wall clock budget")
                try:
                    obj = host_side.recv_obj(timeout=POLL_SECS)
                except TransportTimeout:
                    quiet += 1
                    if not _auto_decide(app, config):
                        continue
                    quiet = 0
                    continue
                except TransportClosed:
                    return
                quiet = 0
                host_deliveries.append(obj)
                try:
                    msg = parse_message(obj)
                except (MalformedJson, ProtocolViolation):
                    continue
                send_all(host.receive(msg))

        drain()                           # leading server emissions
        for turn in spec.agent_script:
            if turn["turn"] == "note":
                app.core.record_user_input()
                host.add_user_note(turn["text"])
            else:
                send_all(host.start_turn(turn))
            drain()
        drain()

        delivered = {"host": [json.dumps(obj, ensure_ascii=False)
                              for obj in host_deliveries]}
        for server_id, path in transcripts.items():
            lines = []
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as fh:
                    lines = [line.rstrip("\n") for line in fh if line.strip()]
            delivered[server_id] = lines
        compromised = evaluate_predicate(spec.compromise_predicate, delivered,
                                         host.context)
        return RunResult(
            scenario_id=spec.scenario_id,
            vuln_class=spec.vuln_class,
            config=config,
            status="ok",
            compromised=compromised,
            blocked_at=_first_block(core),
            steps=len(host_deliveries),
            deliveries=[("host", obj) for obj in host_deliveries],
            host_context=list(host.context),
        )
    except TimeoutError as exc:
        return RunResult(
            scenario_id=spec.scenario_id, vuln_class=spec.vuln_class,
            config=config, status="failed", compromised=False,
            blocked_at=None, failure=str(exc),
        )
    finally:
        app.shutdown()


def _auto_decide(app: GatewayApp, config: HarnessConfig) -> bool:
    pending = app.core.pending_consents()
    for entry in pending:
        app.decide(entry["consent_id"], allow=config.consent == "auto_allow",
                   scope=ConsentScope.ONCE)
    return bool(pending)


def _first_block(core: GatewayCore) -> str | None:
    for event in core.audit.all_events():
        if event["type"] == "message_blocked":
            stage = event["data"].get("stage")
            return _STAGE_NAMES.get(stage, stage)
        if event["type"] == "auth_failure":
            return _STAGE_NAMES["channel_auth"]
    return None
