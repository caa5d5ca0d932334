"""Command-line front ends.

Three entry points share this module:

* ``gateway``    run the interposition proxy, or benchmark its pipeline
* ``authority``  operate a capability authority (keys, certificates,
                 revocation, federation)
* ``harness``    run the adversarial scenario suite and write reports

Exit codes: 0 success, 1 operational failure (verdict not valid,
route unreachable in strict mode, harness failures), 2 bad input.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
import time
from typing import Any, NoReturn

from .attestation import (
    AttestationError,
    AttestationVerifier,
    CrossSignature,
    TrustStore,
    load_certificate,
)
from .authority import (
    Authority,
    AuthorityError,
    LedgerError,
    TRUST_STORE_FILE,
    _write_private_json,
    write_json,
)
from .bench import format_report as format_bench, measure_overhead
from .channel import PinStore, PinStoreCorrupt
from .control import GatewayApp
from .core import GatewayConfig, GatewayCore
from .harness import (
    HarnessConfig,
    ScenarioInvalid,
    SuiteReport,
    builtin_suite,
    format_report,
    load_scenario,
    run_scenario,
    run_scenario_stdio,
)
from .policy import ConsentBroker, GatewayMode, IsolationLevel
from .audit import AuditLog
from .transports import BootstrapError, SubprocessTransport, TransportError, stdio_transport

EVIDENCE_KINDS = ("dns_txt", "registry_account", "operator_asserted")
REVOKE_REASONS = ("compromise", "standard")


def _fail(message: str, code: int = 2) -> NoReturn:
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        _fail(f"{path}: no such file")
    except ValueError:
        _fail(f"{path}: not valid JSON")


def _note(message: str) -> None:
    print(message, file=sys.stderr)


# ----------------------------------------------------------------------
# Trust material loading


def _merge_trust(store_paths: list[str], edge_paths: list[str]) -> TrustStore:
    roots: dict[str, bytes] = {}
    edges: list[CrossSignature] = []
    for path in store_paths:
        try:
            store = TrustStore.from_obj(_load_json(path))
        except AttestationError as exc:
            _fail(f"{path}: {exc}")
        for authority_id, key in store.roots.items():
            if roots.get(authority_id, key) != key:
                _fail(f"{path}: conflicting key for authority {authority_id!r}")
            roots[authority_id] = key
        edges.extend(store.cross_signatures)
    for path in edge_paths:
        edges.append(_read_cross_signature(path))
    return TrustStore(roots=roots, cross_signatures=edges)


def _read_cross_signature(path: str) -> CrossSignature:
    obj = _load_json(path)
    body = obj.get("cross_signature", obj) if isinstance(obj, dict) else obj
    try:
        return CrossSignature.from_obj(body)
    except AttestationError as exc:
        _fail(f"{path}: {exc}")


def _read_public_key(path: str, prefer_id: str | None = None) -> tuple[str | None, bytes]:
    """Pull an Ed25519 public key out of whichever file shape it lives
    in: a trust store, an identity file, or a bare base64 line."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        _fail(f"{path}: no such file")
    try:
        obj = json.loads(text)
    except ValueError:
        obj = None
    if isinstance(obj, dict):
        if "trust_store" in obj:
            store = TrustStore.from_obj(obj)
            if prefer_id is not None and prefer_id in store.roots:
                return prefer_id, store.roots[prefer_id]
            if len(store.roots) == 1:
                return next(iter(store.roots.items()))
            _fail(f"{path}: trust store holds {len(store.roots)} roots; "
                  f"cannot pick one")
        for wrapper in ("server_key", "authority_key"):
            inner = obj.get(wrapper)
            if isinstance(inner, dict) and "public_key" in inner:
                ident = inner.get("server_id") or inner.get("authority_id")
                return ident, base64.b64decode(inner["public_key"], validate=True)
        if "public_key" in obj:
            return obj.get("id"), base64.b64decode(obj["public_key"], validate=True)
        _fail(f"{path}: no public key found")
    try:
        key = base64.b64decode(text.strip(), validate=True)
    except Exception:
        _fail(f"{path}: neither JSON with a public key nor bare base64")
    if len(key) != 32:
        _fail(f"{path}: key must be 32 bytes")
    return None, key


# ----------------------------------------------------------------------
# authority


def authority_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="authority",
        description="Operate a capability authority.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="create a new authority")
    p.add_argument("--dir", required=True, help="authority state directory")
    p.add_argument("--id", required=True, dest="authority_id")

    p = sub.add_parser("issue", help="issue a capability certificate")
    p.add_argument("--dir", required=True)
    p.add_argument("--server-id", required=True)
    p.add_argument("--capabilities", required=True,
                   help="comma-separated capability classes")
    p.add_argument("--validity-days", type=int, required=True)
    p.add_argument("--evidence", choices=EVIDENCE_KINDS,
                   default="operator_asserted",
                   help="how the server operator's identity was checked")
    p.add_argument("--out", required=True, help="certificate file to write")
    p.add_argument("--server-public",
                   help="existing server public key (omit to mint a keypair)")
    p.add_argument("--identity-out",
                   help="where to write a freshly minted server keypair")

    p = sub.add_parser("revoke", help="record a revocation in the ledger")
    p.add_argument("--dir", required=True)
    p.add_argument("--serial", required=True)
    p.add_argument("--reason", choices=REVOKE_REASONS, default="standard")

    p = sub.add_parser("crl", help="emit a signed revocation list")
    p.add_argument("--dir", required=True)
    p.add_argument("--next-update-hours", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cross-sign", help="vouch for a peer authority's key")
    p.add_argument("--dir", required=True)
    p.add_argument("--signee-id", required=True)
    p.add_argument("--signee-public", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", help="run the gateway's certificate check")
    p.add_argument("--cert", required=True)
    p.add_argument("--trust-store", action="append", default=[],
                   required=False)
    p.add_argument("--cross-sig", action="append", default=[])
    p.add_argument("--crl", action="append", default=[])
    p.add_argument("--at", type=float, default=None,
                   help="verification time (unix seconds, default now)")

    args = parser.parse_args(argv)
    return _AUTHORITY_COMMANDS[args.command](args)


def _cmd_keygen(args: argparse.Namespace) -> int:
    try:
        authority = Authority.create(args.dir, args.authority_id)
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    store = TrustStore(roots={authority.authority_id: authority.key.public_bytes},
                       cross_signatures=[])
    public_path = os.path.join(args.dir, TRUST_STORE_FILE)
    write_json(public_path, store.to_obj())
    _note(f"authority {args.authority_id!r} created in {args.dir}")
    _note(f"trust store written to {public_path}")
    return 0


def _cmd_issue(args: argparse.Namespace) -> int:
    if args.validity_days < 1:
        _fail("--validity-days must be at least 1")
    capabilities = [c.strip() for c in args.capabilities.split(",") if c.strip()]
    if not capabilities:
        _fail("--capabilities must name at least one capability class")
    try:
        authority = Authority.load(args.dir)
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    public_key = None
    if args.server_public is not None:
        _, public_key = _read_public_key(args.server_public)
    elif args.identity_out is None:
        _fail("--identity-out is required when minting a new server keypair")
    now = time.time()
    try:
        cert, identity = authority.issue(
            server_id=args.server_id,
            capabilities=capabilities,
            issued_at=now,
            expires_at=now + args.validity_days * 86400,
            server_public_key=public_key,
            evidence=args.evidence,
        )
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    write_json(args.out, cert.to_obj())
    if identity is not None:
        _write_private_json(args.identity_out, identity.to_obj())
        _note(f"server keypair written to {args.identity_out}")
    _note(f"certificate for {args.server_id!r} written to {args.out}")
    print(cert.serial)
    return 0


def _cmd_revoke(args: argparse.Namespace) -> int:
    try:
        authority = Authority.load(args.dir)
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    if args.serial not in authority.issued_serials():
        _note(f"warning: serial {args.serial} is not in this authority's "
              f"ledger; recording defensively")
    try:
        authority.revoke(args.serial, args.reason, time.time(),
                         require_issued=False)
    except LedgerError as exc:
        _note(str(exc))                   # already revoked: idempotent success
        return 0
    _note(f"revoked {args.serial} ({args.reason})")
    return 0


def _cmd_crl(args: argparse.Namespace) -> int:
    if args.next_update_hours <= 0:
        _fail("--next-update-hours must be positive")
    try:
        authority = Authority.load(args.dir)
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    now = time.time()
    obj = authority.emit_crl(issued_at=now,
                             next_update=now + args.next_update_hours * 3600)
    write_json(args.out, obj)
    _note(f"revocation list with {len(obj['crl']['revoked'])} entries "
          f"written to {args.out}")
    return 0


def _cmd_cross_sign(args: argparse.Namespace) -> int:
    try:
        authority = Authority.load(args.dir)
    except AuthorityError as exc:
        _fail(str(exc), code=1)
    if args.signee_id == authority.authority_id:
        _fail("an authority cannot cross-sign its own identity", code=1)
    _, key = _read_public_key(args.signee_public, prefer_id=args.signee_id)
    record = authority.cross_sign(args.signee_id, key)
    write_json(args.out, {"cross_signature": record.to_obj()})
    _note(f"{authority.authority_id} now vouches for {args.signee_id}; "
          f"record written to {args.out}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    if not args.trust_store:
        _fail("at least one --trust-store is required")
    try:
        cert = load_certificate(args.cert)
    except AttestationError as exc:
        _fail(f"{args.cert}: {exc}")
    verifier = AttestationVerifier(_merge_trust(args.trust_store, args.cross_sig))
    for path in args.crl:
        try:
            verifier.load_crl(_load_json(path))
        except AttestationError as exc:
            _fail(f"{path}: {exc}")
    at = args.at if args.at is not None else time.time()
    verdict = verifier.verify(cert, now=at)
    print(verdict.value)
    return 0 if verdict.value == "valid" else 1


_AUTHORITY_COMMANDS = {
    "keygen": _cmd_keygen,
    "issue": _cmd_issue,
    "revoke": _cmd_revoke,
    "crl": _cmd_crl,
    "cross-sign": _cmd_cross_sign,
    "verify": _cmd_verify,
}


# ----------------------------------------------------------------------
# gateway


def _parse_route(entry: Any, seen: set[str]) -> dict[str, Any]:
    if not isinstance(entry, dict):
        _fail("config: each route must be an object")
    server_id = entry.get("server_id")
    if not isinstance(server_id, str) or not server_id:
        _fail("config: route needs a server_id string")
    if server_id in seen:
        _fail(f"config: duplicate route server_id {server_id!r}")
    seen.add(server_id)
    transport = entry.get("transport")
    if not isinstance(transport, dict) or transport.get("kind") not in (
            "stdio_spawn", "http"):
        _fail(f"config: route {server_id!r} transport must have kind "
              f"'stdio_spawn' or 'http'")
    if transport["kind"] == "stdio_spawn":
        command = transport.get("command")
        if not isinstance(command, str) or not command:
            _fail(f"config: route {server_id!r} needs a command")
        route_args = transport.get("args", [])
        if not isinstance(route_args, list) or \
                not all(isinstance(a, str) for a in route_args):
            _fail(f"config: route {server_id!r} args must be strings")
        env = transport.get("env")
        if env is not None and not (
                isinstance(env, dict)
                and all(isinstance(k, str) and isinstance(v, str)
                        for k, v in env.items())):
            _fail(f"config: route {server_id!r} env must map strings to strings")
    else:
        if not isinstance(transport.get("url"), str):
            _fail(f"config: route {server_id!r} needs a url")
    return entry


def _route_expectation(entry: dict[str, Any]) -> str | None:
    """Resolve what certificate fingerprint the route must present."""
    expected = entry.get("expected_fingerprint")
    cert_path = entry.get("certificate_path")
    if cert_path is not None:
        try:
            pinned = load_certificate(cert_path).fingerprint()
        except AttestationError as exc:
            _fail(f"{cert_path}: {exc}")
        if expected is not None and expected != pinned:
            _fail(f"config: route {entry['server_id']!r}: expected_fingerprint "
                  f"and certificate_path disagree")
        return pinned
    return expected


def gateway_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gateway",
        description="Security gateway between an MCP host and its servers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="relay host stdio through the pipeline")
    p.add_argument("--config", required=True, help="JSON file with a routes array")
    p.add_argument("--mode", choices=[m.value for m in GatewayMode],
                   default=GatewayMode.PROMPT.value)
    p.add_argument("--isolation", choices=[i.value for i in IsolationLevel],
                   default=IsolationLevel.USER_PROMPTED.value)
    p.add_argument("--control-port", type=int, default=0,
                   help="0 picks a free port; the choice is printed to stderr")
    p.add_argument("--trust-store", required=True)
    p.add_argument("--pin-store", default=None)
    p.add_argument("--audit-log", default=None)
    p.add_argument("--crl", action="append", default=[])
    p.add_argument("--attestation", choices=["on", "off"], default="on",
                   help="off runs the gateway as a logging relay")

    p = sub.add_parser("bench", help="loopback pipeline latency report")
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--cold-runs", type=int, default=20)

    args = parser.parse_args(argv)
    if args.command == "bench":
        print(format_bench(measure_overhead(iterations=args.iterations,
                                            cold_runs=args.cold_runs)))
        return 0
    return _cmd_gateway_run(args)


def _cmd_gateway_run(args: argparse.Namespace) -> int:
    config_obj = _load_json(args.config)
    routes_obj = config_obj.get("routes") if isinstance(config_obj, dict) else None
    if not isinstance(routes_obj, list):
        _fail("config: top level must be an object with a routes array")
    seen: set[str] = set()
    routes = [_parse_route(entry, seen) for entry in routes_obj]

    verifier = AttestationVerifier(_merge_trust([args.trust_store], []))
    for path in args.crl:
        try:
            verifier.load_crl(_load_json(path))
        except AttestationError as exc:
            _fail(f"{path}: {exc}")
    try:
        pin_store = PinStore(args.pin_store)
    except PinStoreCorrupt as exc:
        _fail(f"{args.pin_store}: {exc}", code=1)

    mode = GatewayMode(args.mode)
    core = GatewayCore(
        GatewayConfig(mode=mode,
                      isolation=IsolationLevel(args.isolation),
                      attestation_enabled=args.attestation == "on"),
        verifier,
        pin_store=pin_store,
        audit=AuditLog(args.audit_log),
        broker=ConsentBroker(),
    )
    app = GatewayApp(core)
    strict = mode is GatewayMode.STRICT

    try:
        for entry in routes:
            server_id = entry["server_id"]
            transport_obj = entry["transport"]
            expected = _route_expectation(entry)
            if transport_obj["kind"] == "http":
                message = f"route {server_id!r}: http transport is not " \
                          f"supported by this build"
                if strict:
                    _fail(message, code=1)
                _note(f"warning: {message}; skipping route")
                core.audit.emit("route_unreachable", server_id=server_id,
                                reason="http_unsupported")
                continue
            argv_route = [transport_obj["command"], *transport_obj.get("args", [])]
            env = transport_obj.get("env")
            try:
                transport = SubprocessTransport(argv_route, env=env)
                result = app.connect_server(server_id, transport,
                                            expected_fingerprint=expected)
            except (TransportError, BootstrapError, OSError) as exc:
                if strict:
                    _fail(f"route {server_id!r}: {exc}", code=1)
                _note(f"warning: route {server_id!r} unreachable: {exc}")
                core.audit.emit("route_unreachable", server_id=server_id,
                                reason=str(exc))
                continue
            state = "attested" if result.attested else "plain"
            _note(f"route {server_id!r} connected ({state})")

        port = app.start_control(port=args.control_port)
        _note(f"control api on 127.0.0.1:{port}")
        app.start_sweeper()
        app.attach_host(stdio_transport())
        app.join_host()
    except KeyboardInterrupt:
        pass
    finally:
        app.shutdown()
    return 0


# ----------------------------------------------------------------------
# harness


def _load_suite(directory: str | None) -> list:
    if directory is None:
        return builtin_suite()
    paths = sorted(
        os.path.join(directory, name)
        for name in os.listdir(directory)
        if name.endswith(".json")
    )
    if not paths:
        _fail(f"{directory}: no scenario .json files")
    suite = []
    for path in paths:
        try:
            suite.append(load_scenario(_load_json(path)))
        except ScenarioInvalid as exc:
            _fail(f"{path}: {exc}")
    return suite


def _load_configs(path: str | None) -> list[HarnessConfig]:
    if path is None:
        return [
            HarnessConfig(name="undefended", mode=GatewayMode.PERMISSIVE,
                          isolation=IsolationLevel.NONE, attestation=False,
                          consent="auto_allow", oracle="naive"),
            HarnessConfig(name="defended", mode=GatewayMode.STRICT,
                          isolation=IsolationLevel.STRICT, attestation=True,
                          consent="auto_deny", oracle="naive"),
        ]
    obj = _load_json(path)
    if not isinstance(obj, list) or not obj:
        _fail(f"{path}: must be a nonempty JSON list of configurations")
    try:
        configs = [HarnessConfig.from_obj(entry) for entry in obj]
    except (KeyError, ValueError, AssertionError, TypeError) as exc:
        _fail(f"{path}: bad configuration: {exc}")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        _fail(f"{path}: configuration names must be unique")
    return configs


def harness_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="harness",
        description="Deterministic adversarial scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run scenarios against configurations")
    p.add_argument("--suite", default=None,
                   help="directory of scenario JSON files (default: built-ins)")
    p.add_argument("--configs", default=None,
                   help="JSON list of configurations (default: "
                        "undefended vs defended)")
    p.add_argument("--report", default=None, help="write full JSON report here")
    p.add_argument("--stdio", action="store_true",
                   help="run mock servers as real subprocesses")
    p.add_argument("--step-budget", type=int, default=500)

    p = sub.add_parser("export", help="write built-in scenarios as JSON files")
    p.add_argument("--dir", required=True)

    args = parser.parse_args(argv)
    if args.command == "export":
        os.makedirs(args.dir, exist_ok=True)
        for spec in builtin_suite():
            write_json(os.path.join(args.dir, f"{spec.scenario_id}.json"),
                       spec.to_obj())
        _note(f"wrote {len(builtin_suite())} scenarios to {args.dir}")
        return 0

    suite = _load_suite(args.suite)
    configs = _load_configs(args.configs)
    if args.stdio:
        results = [run_scenario_stdio(spec, config)
                   for config in configs for spec in suite]
        report = SuiteReport(results=results)
    else:
        results = [run_scenario(spec, config, args.step_budget)
                   for config in configs for spec in suite]
        report = SuiteReport(results=results)
    print(format_report(report))
    if args.report is not None:
        write_json(args.report, report.to_obj())
        _note(f"report written to {args.report}")
    return 1 if report.failures() else 0


if __name__ == "__main__":
    name = os.path.basename(sys.argv[0])
    main = {"authority": authority_main, "harness": harness_main}.get(
        name, gateway_main)
    sys.exit(main())
