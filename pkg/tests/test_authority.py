"""Authority toolchain: key storage, issuance ledger, revocation, CRLs."""

import json
import os
import stat

import pytest

import oracles
from mcpgate.attestation import AttestationVerifier, TrustStore, Verdict, parse_crl
from mcpgate.authority import (
    Authority,
    AuthorityError,
    AuthorityKey,
    LedgerError,
    ServerIdentity,
    build_certificate,
    generate_authority_key,
    generate_server_identity,
    new_serial,
)

T0 = 1_706_140_800
T1 = 1_737_676_800


@pytest.fixture
def authority(tmp_path):
    return Authority.create(str(tmp_path / "ca"), "anthropic-ca")


def verifier_for(authority: Authority) -> AttestationVerifier:
    store = TrustStore(
        roots={authority.authority_id: authority.key.public_bytes}, cross_signatures=[]
    )
    return AttestationVerifier(store)


class TestKeyStorage:
    def test_create_then_load(self, tmp_path):
        a = Authority.create(str(tmp_path / "ca"), "anthropic-ca")
        b = Authority.load(str(tmp_path / "ca"))
        assert b.authority_id == "anthropic-ca"
        assert b.key.public_bytes == a.key.public_bytes

    def test_key_file_is_owner_only(self, authority):
        path = os.path.join(authority.directory, "authority_key.json")
        mode = stat.S_IMODE(os.stat(path).st_mode)
        assert mode == 0o600

    def test_create_refuses_overwrite(self, authority):
        with pytest.raises(AuthorityError):
            Authority.create(authority.directory, "other")

    def test_load_missing(self, tmp_path):
        with pytest.raises(AuthorityError):
            Authority.load(str(tmp_path / "nope"))

    def test_key_obj_round_trip(self):
        key = generate_authority_key("x-ca")
        again = AuthorityKey.from_obj(key.to_obj())
        assert again.public_bytes == key.public_bytes
        assert again.sign(b"m") == key.sign(b"m")

    def test_server_identity_round_trip(self):
        ident = generate_server_identity("srv")
        again = ServerIdentity.from_obj(ident.to_obj())
        assert again.public_bytes == ident.public_bytes


class TestIssue:
    def test_issue_produces_valid_cert(self, authority):
        cert, identity = authority.issue("filesystem-server", ["tools", "resources"], T0, T1)
        assert identity is not None
        assert cert.capabilities == ("resources", "tools")     # sorted, deduped
        assert cert.public_key == identity.public_bytes
        assert verifier_for(authority).verify(cert, now=T0 + 1) is Verdict.VALID

    def test_issue_with_existing_key_emits_no_identity(self, authority):
        ident = generate_server_identity("srv")
        cert, sidecar = authority.issue(
            "srv", ["tools"], T0, T1, server_public_key=ident.public_bytes
        )
        assert sidecar is None
        assert cert.public_key == ident.public_bytes

    def test_signature_checks_out_independently(self, authority):
        cert, _ = authority.issue("srv", ["prompts"], T0, T1)
        inner = cert.to_obj()["capability_cert"]
        body = {k: v for k, v in inner.items() if k != "signature"}
        assert oracles.ed25519_verify(
            authority.key.public_bytes, oracles.canonical_bytes(body), cert.signature
        )

    def test_serials_are_unique_hex(self, authority):
        serials = {authority.issue("s", ["tools"], T0, T1)[0].serial for _ in range(8)}
        assert len(serials) == 8
        for s in serials:
            assert len(s) == 32 and all(c in "0123456789abcdef" for c in s)

    def test_issue_appends_ledger(self, authority):
        cert, _ = authority.issue("srv", ["tools"], T0, T1)
        lines = open(authority.ledger_path).read().splitlines()
        entries = [json.loads(l) for l in lines]
        assert entries[-1]["op"] == "issue"
        assert entries[-1]["serial"] == cert.serial
        assert entries[-1]["capabilities"] == ["tools"]

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(capabilities=[]),
            dict(capabilities=["network"]),
            dict(expires_at=T0),                   # empty validity window
            dict(serial="xyz"),
            dict(serial="AB" * 16),
        ],
    )
    def test_bad_issue_rejected(self, authority, kwargs):
        base = dict(
            server_id="s", capabilities=["tools"], issued_at=T0, expires_at=T1
        )
        base.update(kwargs)
        with pytest.raises(AuthorityError):
            authority.issue(**base)


class TestRevokeAndCrl:
    def test_revoke_then_crl_round_trip(self, authority):
        cert, _ = authority.issue("srv", ["tools"], T0, T1)
        authority.revoke(cert.serial, "key-compromise", T0 + 100)
        obj = authority.emit_crl(issued_at=T0 + 101, next_update=T0 + 90101)
        crl = parse_crl(obj)
        assert crl.issuer == "anthropic-ca"
        assert crl.revoked_serials() == {cert.serial}
        assert crl.revoked[0].reason == "key-compromise"
        v = verifier_for(authority)
        v.load_crl(obj)
        assert v.verify(cert, now=T0 + 200) is Verdict.REVOKED

    def test_revoke_unknown_serial(self, authority):
        with pytest.raises(LedgerError):
            authority.revoke(new_serial(), "typo", T0)

    def test_double_revoke(self, authority):
        cert, _ = authority.issue("srv", ["tools"], T0, T1)
        authority.revoke(cert.serial, "x", T0)
        with pytest.raises(LedgerError):
            authority.revoke(cert.serial, "x", T0 + 1)

    def test_crl_sorted_by_serial(self, authority):
        certs = [authority.issue("srv", ["tools"], T0, T1)[0] for _ in range(5)]
        for c in certs:
            authority.revoke(c.serial, "r", T0)
        obj = authority.emit_crl(issued_at=T0, next_update=T1)
        serials = [e["serial"] for e in obj["crl"]["revoked"]]
        assert serials == sorted(serials)

    def test_empty_crl_verifies(self, authority):
        obj = authority.emit_crl(issued_at=T0, next_update=T1)
        v = verifier_for(authority)
        v.load_crl(obj)                            # raises if signature bad
        assert parse_crl(obj).revoked == ()


class TestCrossSign:
    def test_cross_sign_extends_trust(self, authority, tmp_path):
        partner = Authority.create(str(tmp_path / "partner"), "partner-ca")
        edge = authority.cross_sign("partner-ca", partner.key.public_bytes)
        store = TrustStore(
            roots={"anthropic-ca": authority.key.public_bytes}, cross_signatures=[edge]
        )
        assert store.is_trusted("partner-ca")
        cert, _ = partner.issue("srv", ["sampling"], T0, T1)
        assert AttestationVerifier(store).verify(cert, now=T0 + 1) is Verdict.VALID

    def test_edge_signature_independent_check(self, authority):
        partner = generate_authority_key("partner-ca")
        edge = authority.cross_sign("partner-ca", partner.public_bytes)
        assert oracles.ed25519_verify(
            authority.key.public_bytes, edge.signed_body(), edge.signature
        )


class TestLedgerLocking:
    def test_concurrent_appends_preserve_every_entry(self, authority):
        import threading

        def worker(n):
            for i in range(20):
                authority.issue(f"srv-{n}-{i}", ["tools"], T0, T1)

        threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        lines = open(authority.ledger_path).read().splitlines()
        entries = [json.loads(l) for l in lines]
        assert len(entries) == 80
        assert len({e["serial"] for e in entries}) == 80
