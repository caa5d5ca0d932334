"""Scripted mock server runnable as a real stdio subprocess.

``python3 -m mcpgate.harness.mockserv --config FILE`` speaks the same
bootstrap and framing a production server would: it answers the
gateway's handshake (signed when attestation material is present,
plain otherwise), then serves its scenario script over newline-framed
JSON-RPC, sealing every outbound frame under the session key.

The config file is one JSON object:

* ``server``        a scenario server entry (same shape the loader takes)
* ``identity_private``  base64 Ed25519 private key, attested mode only
* ``capability_cert``   signed certificate wire object, attested mode only
* ``transcript``    path; every frame this server receives is appended
                    as a JSON line, so the parent can evaluate
                    compromise predicates from outside the process
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from typing import Any, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ..attestation import parse_certificate
from ..channel import SeededNonceSource, seal_message
from ..messages import MalformedJson, ProtocolViolation, RpcMessage, parse_message
from ..transports import TransportClosed, TransportTimeout, serve_bootstrap, stdio_transport
from .actors import MockServer
from .runner import server_seed
from .scenario import _parse_server


def _load_config(path: str) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="mcpgate-mockserv", add_help=True)
    parser.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    cfg = _load_config(args.config)
    spec = _parse_server(cfg["server"])
    mock = MockServer(spec)
    transport = stdio_transport()
    transcript = open(cfg["transcript"], "a", encoding="utf-8") \
        if cfg.get("transcript") else None

    session_key: Optional[bytes] = None
    if cfg.get("identity_private") and cfg.get("capability_cert"):
        identity_key = Ed25519PrivateKey.from_private_bytes(
            base64.b64decode(cfg["identity_private"]))
        cert = parse_certificate({"capability_cert": cfg["capability_cert"]})
        session_key = serve_bootstrap(transport, identity_key=identity_key, cert=cert)
    else:
        serve_bootstrap(transport)
    nonces = SeededNonceSource(server_seed(spec.server_id))

    def send(msg: RpcMessage) -> None:
        if session_key is not None:
            msg = seal_message(msg, session_key, spec.server_id,
                               nonce_source=nonces)
        transport.send_obj(msg.to_obj())

    def flush() -> None:
        for out in mock.flush():
            send(out)

    flush()                               # leading scripted emissions
    try:
        while True:
            try:
                obj = transport.recv_obj(timeout=0.5)
            except TransportTimeout:
                flush()
                continue
            except TransportClosed:
                return 0
            if transcript is not None:
                transcript.write(json.dumps(obj, ensure_ascii=False,
                                            sort_keys=True) + "\n")
                transcript.flush()
            try:
                msg = parse_message(obj)
            except (MalformedJson, ProtocolViolation):
                continue
            for out in mock.receive(msg):
                send(out)
            flush()
    finally:
        if transcript is not None:
            transcript.close()


if __name__ == "__main__":
    sys.exit(main())
