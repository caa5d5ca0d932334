"""Latency measurement for the enforcement pipeline.

Numbers that matter operationally: the steady-state cost a message
pays crossing the gateway, the cost of the per-message authentication
primitives alone, and how much worse the very first message is while
caches are cold.  Medians, not means; the tails belong to the OS.
"""

from __future__ import annotations

import statistics
import time
from typing import Any, Callable

from .attestation import AttestationVerifier, TrustStore
from .authority import build_certificate, generate_authority_key, generate_server_identity
from .channel import (
    NonceWindow,
    SeededNonceSource,
    VerifyOutcome,
    establish_session,
    seal_message,
    verify_message,
)
from .core import GatewayConfig, GatewayCore
from .messages import make_request
from .policy import GatewayMode, IsolationLevel

_NS_PER_MS = 1_000_000


def _median_ms(samples_ns: list[int]) -> float:
    return statistics.median(samples_ns) / _NS_PER_MS


def _fresh_world(now: float) -> tuple[GatewayCore, Callable[[int], Any]]:
    ca = generate_authority_key("bench-ca")
    store = TrustStore(roots={"bench-ca": ca.public_bytes}, cross_signatures=[])
    verifier = AttestationVerifier(store)
    identity = generate_server_identity("bench-server")
    cert = build_certificate(
        ca, "bench-server", ["resources", "tools"],
        now - 3600, now + 86400, identity.public_bytes,
    )
    gateway_key, _ = establish_session(cert, identity.private_key)
    core = GatewayCore(
        GatewayConfig(mode=GatewayMode.STRICT, isolation=IsolationLevel.NONE),
        verifier,
        nonce_source=SeededNonceSource(99),
    )
    core.attach_server("bench-server", cert=cert, session_key=gateway_key)

    def make(i: int):
        return make_request("tools/call",
                            params={"name": "read_file", "arguments": {"path": f"/tmp/{i}"}},
                            msg_id=i)

    return core, make


def bench_pipeline(iterations: int = 300, cold_runs: int = 20) -> dict[str, float]:
    """Median gateway cost per message, cold start versus steady state."""
    now = time.time()

    cold_ns: list[int] = []
    for _ in range(cold_runs):
        core, make = _fresh_world(now)
        start = time.perf_counter_ns()
        result = core.process_host_message(make(0))
        cold_ns.append(time.perf_counter_ns() - start)
        assert result.status == "forwarded"

    core, make = _fresh_world(now)
    for i in range(50):                   # let caches settle
        core.process_host_message(make(i))
    warm_ns: list[int] = []
    for i in range(50, 50 + iterations):
        msg = make(i)
        start = time.perf_counter_ns()
        result = core.process_host_message(msg)
        warm_ns.append(time.perf_counter_ns() - start)
        assert result.status == "forwarded"

    return {
        "cold_p50_ms": _median_ms(cold_ns),
        "warm_p50_ms": _median_ms(warm_ns),
        "cold_runs": float(cold_runs),
        "iterations": float(iterations),
    }


def bench_auth_primitives(iterations: int = 1000) -> dict[str, float]:
    """Median cost of sealing plus verifying one message: two HMAC
    passes, the freshness check, and the nonce-window update."""
    key = bytes(range(32))
    clock = lambda: 1_706_140_800.0
    nonces = SeededNonceSource(7)
    window = NonceWindow()
    msg = make_request("tools/call",
                       params={"name": "read_file", "arguments": {"path": "/tmp/x"}},
                       msg_id=1)
    samples: list[int] = []
    for _ in range(iterations):
        start = time.perf_counter_ns()
        sealed = seal_message(msg, key, "bench-server", clock=clock,
                              nonce_source=nonces)
        outcome = verify_message(sealed, key, window, clock=clock,
                                 expected_server_id="bench-server")
        samples.append(time.perf_counter_ns() - start)
        assert outcome is VerifyOutcome.OK
    return {
        "hmac_nonce_p50_ms": _median_ms(samples),
        "iterations": float(iterations),
    }


def measure_overhead(iterations: int = 300, cold_runs: int = 20,
                     auth_iterations: int = 1000) -> dict[str, float]:
    """Full latency picture for reports and the acceptance gate."""
    out = bench_pipeline(iterations=iterations, cold_runs=cold_runs)
    out.update(bench_auth_primitives(iterations=auth_iterations))
    return out


def format_report(results: dict[str, float]) -> str:
    lines = [
        "gateway latency (medians)",
        f"  cold start, first message : {results['cold_p50_ms']:8.3f} ms",
        f"  steady state, per message : {results['warm_p50_ms']:8.3f} ms",
        f"  seal + verify primitives  : {results['hmac_nonce_p50_ms']:8.3f} ms",
    ]
    return "\n".join(lines)
