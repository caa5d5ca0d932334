"""One-shot validation of the oracle implementations against the stdlib
and published RFC test vectors.  Run manually; not collected by pytest
(the durable versions of these checks live in the test modules)."""

import hashlib
import hmac as stdlib_hmac
import json
import random
import secrets
import sys
import os

sys.path.insert(0, os.path.dirname(__file__))
import oracles


def check_canonicalizer():
    cases = [
        None, True, False, 0, -1, 2**70, 1.5, -0.0, 1e300, 1e-7, 0.1,
        "", "hello", "café", "☃ snow", "\U0001F600", 'a"b\\c',
        "\x00\x07\x08\x09\x0a\x0b\x0c\x0d\x1f\x20\x7f",
        [], {}, [1, [2, [3]]], {"b": 1, "a": 2, "aa": 3},
        {"é": 1, "z": 2, "A": 3, "~": 4, "\x01": 5},
        {"jsonrpc": "2.0", "method": "tools/call", "id": 42,
         "params": {"name": "read_file", "arguments": {"path": "/etc/hosts"}},
         "mcpsec": {"server_id": "fs", "timestamp": 1706140800, "nonce": "AAAA"}},
    ]
    for c in cases:
        a = oracles.canonical_bytes(c)
        b = json.dumps(c, ensure_ascii=False, sort_keys=True,
                       separators=(",", ":"), allow_nan=False).encode("utf-8")
        assert a == b, (c, a, b)
    print("[ok] canonicalizer matches stdlib on", len(cases), "cases")

    rng = random.Random(1234)

    def rand_val(depth=0):
        t = rng.randrange(8 if depth < 4 else 6)
        if t == 0:
            return None
        if t == 1:
            return rng.choice([True, False])
        if t == 2:
            return rng.randrange(-10**12, 10**12)
        if t == 3:
            return rng.choice([rng.random() * 10**rng.randrange(-10, 10),
                               float(rng.randrange(100))])
        if t in (4, 5):
            pools = [lambda: rng.randrange(0x20, 0x7F),
                     lambda: rng.randrange(0xA0, 0x3000),
                     lambda: rng.randrange(0x1F300, 0x1F700),
                     lambda: rng.randrange(0, 0x20)]
            return "".join(chr(rng.choice(pools)()) for _ in range(rng.randrange(12)))
        if t == 6:
            return [rand_val(depth + 1) for _ in range(rng.randrange(4))]
        return {"".join(chr(rng.randrange(1, 0x2500)) for _ in range(rng.randrange(1, 6))):
                rand_val(depth + 1) for _ in range(rng.randrange(4))}

    for i in range(3000):
        v = rand_val()
        a = oracles.canonical_bytes(v)
        b = json.dumps(v, ensure_ascii=False, sort_keys=True,
                       separators=(",", ":"), allow_nan=False).encode("utf-8")
        assert a == b, (i, v)
    print("[ok] canonicalizer fuzz 3000 values")


def check_hmac():
    for i in range(200):
        k = secrets.token_bytes(i % 130)
        m = secrets.token_bytes(i)
        assert oracles.hmac_sha256(k, m) == stdlib_hmac.new(k, m, hashlib.sha256).digest()
    print("[ok] manual HMAC matches stdlib, 200 cases incl. long keys")
    tag = oracles.hmac_sha256(b"Jefe", b"what do ya want for nothing?")
    assert tag.hex() == "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
    print("[ok] HMAC RFC 4231 vector")


def check_hkdf():
    ikm = bytes.fromhex("0b" * 22)
    salt = bytes.fromhex("000102030405060708090a0b0c")
    info = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9")
    okm = oracles.hkdf(ikm, salt, info, 42)
    assert okm.hex() == ("3cb25f25faacd57a90434f64d0362f2a"
                         "2d2d0a90cf1a5a4c5db02d56ecc4c5bf"
                         "34007208d5b887185865")
    print("[ok] HKDF RFC 5869 vector")


def check_x25519():
    s1 = bytes.fromhex("a546e36bf0527c9d3b16154b82465edd62144c0ac1fc5a18506a2244ba449ac4")
    u1 = bytes.fromhex("e6db6867583030db3594c1a424b15f7c726624ec26b3353b10a903a6d0ab1c4c")
    assert oracles.x25519(s1, u1).hex() == \
        "c3da55379de9c6908e94ea4df28d084f32eccf03491c71f754b4075577a28552"
    s2 = bytes.fromhex("4b66e9d4d1b4673c5ad22691957d6af5c11b6421e0ea01d42ca4169e7918ba0d")
    u2 = bytes.fromhex("e5210f12786811d3f4b7959d0538ae2c31dbe7106fc03c3efc4cd549c715a493")
    assert oracles.x25519(s2, u2).hex() == \
        "95cbde9476e8907d7aade45cb4b873f88b595a68799fa152e6f8f7647aac7957"
    a_priv = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    b_priv = bytes.fromhex("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
    a_pub = oracles.x25519_public(a_priv)
    b_pub = oracles.x25519_public(b_priv)
    assert a_pub.hex() == "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a"
    assert b_pub.hex() == "de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f"
    shared = oracles.x25519(a_priv, b_pub)
    assert shared == oracles.x25519(b_priv, a_pub)
    assert shared.hex() == "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742"
    print("[ok] X25519 RFC 7748 vectors incl. DH agreement")


def check_ed25519():
    vecs = [
        ("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a", "",
         "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155"
         "5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"),
        ("3d4017c3e843895a92b70aa74d1b7ebc9c982ccf2ec4968cc0cd55f12af4660c", "72",
         "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da"
         "085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00"),
        ("fc51cd8e6218a1a38da47ed00230f0580816ed13ba3303ac5deb911548908025", "af82",
         "6291d657deec24024827e69c3abe01a30ce548a284743a445e3680d7db5ac3ac"
         "18ff9b538d16f290ae67f760984dc6594a7c15e9716ed28dc027beceea1ec40a"),
    ]
    for pk, msg, sig in vecs:
        assert oracles.ed25519_verify(bytes.fromhex(pk), bytes.fromhex(msg), bytes.fromhex(sig))
        bad = bytearray(bytes.fromhex(sig))
        bad[0] ^= 1
        assert not oracles.ed25519_verify(bytes.fromhex(pk), bytes.fromhex(msg), bytes(bad))
        assert not oracles.ed25519_verify(bytes.fromhex(pk), bytes.fromhex(msg) + b"x",
                                          bytes.fromhex(sig))
    print("[ok] Ed25519 RFC 8032 vectors verify, corrupted reject")


if __name__ == "__main__":
    check_canonicalizer()
    check_hmac()
    check_hkdf()
    check_x25519()
    check_ed25519()
    print("ALL ORACLE SELF-CHECKS PASS")
