"""Message layer: parsing, classification, canonical bytes, framing."""

import base64
import io
import json

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mcpgate.messages import (
    ABSENT,
    CapabilityClass,
    FrameReader,
    FrameTooLarge,
    MalformedJson,
    MessageKind,
    McpSecEnvelope,
    NonCanonicalizable,
    ProtocolViolation,
    RpcMessage,
    StreamClosed,
    canonical_json_bytes,
    classify_method,
    make_error_response,
    make_notification,
    make_request,
    make_response,
    parse_message,
    serialize_canonical,
    write_frame,
)


def b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


GOOD_ENVELOPE = {
    "server_id": "filesystem-server",
    "timestamp": 1706140800,
    "nonce": b64(bytes(range(32))),
    "hmac": b64(bytes(reversed(range(32)))),
}

_B64_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


def noncanonical_b64(raw: bytes) -> str:
    """Encoding that decodes to ``raw`` but is not the canonical form:
    flips a padding bit that base64 decoding discards."""
    encoded = base64.b64encode(raw).decode("ascii")
    assert encoded.endswith("=") and not encoded.endswith("==")
    idx = _B64_ALPHABET.index(encoded[-2])
    twisted = encoded[:-2] + _B64_ALPHABET[idx ^ 1] + "="
    assert base64.b64decode(twisted) == raw and twisted != encoded
    return twisted


class TestParse:
    def test_request(self):
        msg = parse_message(b'{"jsonrpc":"2.0","id":1,"method":"tools/call","params":{"name":"t"}}')
        assert msg.kind is MessageKind.REQUEST
        assert msg.id == 1
        assert msg.method == "tools/call"
        assert msg.params == {"name": "t"}
        assert msg.result is ABSENT
        assert msg.error is None
        assert not msg.has_envelope

    def test_notification(self):
        msg = parse_message({"jsonrpc": "2.0", "method": "notifications/initialized"})
        assert msg.kind is MessageKind.NOTIFICATION
        assert msg.id is ABSENT
        assert msg.params is ABSENT

    def test_result_response(self):
        msg = parse_message({"jsonrpc": "2.0", "id": "a", "result": {"ok": True}})
        assert msg.kind is MessageKind.RESPONSE
        assert msg.result == {"ok": True}
        assert msg.error is None

    def test_error_response(self):
        msg = parse_message(
            {"jsonrpc": "2.0", "id": None, "error": {"code": -32700, "message": "parse"}}
        )
        assert msg.kind is MessageKind.RESPONSE
        assert msg.id is None
        assert msg.error.code == -32700
        assert msg.error.data is ABSENT

    def test_null_id_with_method_is_request(self):
        # Kind classification keys off member presence, not null-ness.
        msg = parse_message({"jsonrpc": "2.0", "id": None, "method": "ping"})
        assert msg.kind is MessageKind.REQUEST
        assert msg.id is None

    def test_garbage_bytes(self):
        with pytest.raises(MalformedJson):
            parse_message(b"{not json")
        with pytest.raises(MalformedJson):
            parse_message(b"\xff\xfe")

    @pytest.mark.parametrize(
        "obj",
        [
            [],
            b'"string"',
            42,
            {"jsonrpc": "1.0", "id": 1, "method": "m"},
            {"id": 1, "method": "m"},
            {"jsonrpc": "2.0"},
            {"jsonrpc": "2.0", "id": 1},
            {"jsonrpc": "2.0", "id": 1, "result": 1, "error": {"code": 1, "message": "x"}},
            {"jsonrpc": "2.0", "result": 1},
            {"jsonrpc": "2.0", "id": 1, "method": "m", "result": 1},
            {"jsonrpc": "2.0", "id": 1, "method": 42},
            {"jsonrpc": "2.0", "id": {"bad": 1}, "method": "m"},
            {"jsonrpc": "2.0", "id": 1, "method": "m", "params": "scalar"},
            {"jsonrpc": "2.0", "id": 1, "error": {"code": "x", "message": "m"}},
            {"jsonrpc": "2.0", "id": 1, "error": {"message": "m"}},
            {"jsonrpc": "2.0", "id": 1, "error": {"code": 1, "message": "m", "weird": 0}},
        ],
    )
    def test_protocol_violations(self, obj):
        with pytest.raises(ProtocolViolation):
            parse_message(obj)

    def test_extra_members_preserved(self):
        obj = {"jsonrpc": "2.0", "id": 1, "method": "ping", "vendor_meta": {"x": 1}}
        msg = parse_message(obj)
        assert msg.extra == {"vendor_meta": {"x": 1}}
        assert msg.to_obj()["vendor_meta"] == {"x": 1}


class TestEnvelope:
    def test_good_envelope(self):
        obj = {"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": dict(GOOD_ENVELOPE)}
        msg = parse_message(obj)
        assert msg.has_envelope and not msg.envelope_malformed
        env = msg.envelope
        assert env.server_id == "filesystem-server"
        assert env.timestamp == 1706140800
        assert env.nonce == bytes(range(32))
        assert env.hmac == bytes(reversed(range(32)))

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda e: e.pop("hmac"),
            lambda e: e.pop("nonce"),
            lambda e: e.pop("server_id"),
            lambda e: e.pop("timestamp"),
            lambda e: e.update(extra="field"),
            lambda e: e.update(server_id=""),
            lambda e: e.update(server_id=7),
            lambda e: e.update(timestamp="soon"),
            lambda e: e.update(timestamp=True),
            lambda e: e.update(nonce="!!!notb64!!!"),
            lambda e: e.update(nonce=b64(b"short")),
            lambda e: e.update(hmac=b64(bytes(16))),
            # non-canonical base64: same bytes, different encoding
            lambda e: e.update(nonce=noncanonical_b64(bytes(range(32)))),
        ],
    )
    def test_malformed_envelope_carried_not_raised(self, mutate):
        env = dict(GOOD_ENVELOPE)
        mutate(env)
        obj = {"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": env}
        msg = parse_message(obj)
        assert msg.has_envelope
        assert msg.envelope_malformed
        # wire form is preserved for auditability
        assert msg.to_obj()["mcpsec"] == env

    def test_envelope_non_dict_carried(self):
        msg = parse_message({"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": "nope"})
        assert msg.envelope_malformed
        assert msg.to_obj()["mcpsec"] == "nope"

    def test_exclude_hmac_drops_only_hmac(self):
        obj = {"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": dict(GOOD_ENVELOPE)}
        msg = parse_message(obj)
        stripped = msg.to_obj(exclude_hmac=True)["mcpsec"]
        assert set(stripped) == {"server_id", "timestamp", "nonce"}
        assert stripped["nonce"] == GOOD_ENVELOPE["nonce"]


class TestClassify:
    @pytest.mark.parametrize(
        "method,cap",
        [
            ("resources/read", CapabilityClass.RESOURCES),
            ("resources/subscribe", CapabilityClass.RESOURCES),
            ("notifications/resources/updated", CapabilityClass.RESOURCES),
            ("tools/call", CapabilityClass.TOOLS),
            ("tools/list", CapabilityClass.TOOLS),
            ("prompts/get", CapabilityClass.PROMPTS),
            ("sampling/createMessage", CapabilityClass.SAMPLING),
        ],
    )
    def test_capability_methods(self, method, cap):
        c = classify_method(method)
        assert c.known and c.capability is cap

    @pytest.mark.parametrize(
        "method", ["initialize", "ping", "notifications/initialized", "logging/setLevel",
                   "completion/complete", "roots/list"]
    )
    def test_neutral_methods(self, method):
        c = classify_method(method)
        assert c.known and c.capability is None

    @pytest.mark.parametrize("method", ["tools/execute", "files/read", "x", ""])
    def test_unknown_methods(self, method):
        c = classify_method(method)
        assert not c.known and c.capability is None


class TestCanonical:
    def test_frozen_vectors_main_path(self, kats):
        for vec in kats["canonical"]:
            expected = base64.b64decode(vec["canonical_b64"])
            assert canonical_json_bytes(vec["value"]) == expected

    def test_frozen_vectors_oracle_agrees(self, kats):
        # guards the frozen file itself against drift
        for vec in kats["canonical"]:
            expected = base64.b64decode(vec["canonical_b64"])
            assert oracles.canonical_bytes(vec["value"]) == expected

    def test_key_order_irrelevant(self):
        a = {"b": 1, "a": {"y": 2, "x": 3}}
        b = {"a": {"x": 3, "y": 2}, "b": 1}
        assert canonical_json_bytes(a) == canonical_json_bytes(b)

    def test_rejects_nan_and_inf(self):
        for bad in (float("nan"), float("inf"), float("-inf")):
            with pytest.raises(NonCanonicalizable):
                canonical_json_bytes({"x": bad})

    def test_rejects_non_string_keys(self):
        with pytest.raises(NonCanonicalizable):
            canonical_json_bytes({1: "x"})

    def test_rejects_non_json_types(self):
        with pytest.raises(NonCanonicalizable):
            canonical_json_bytes({"x": object()})
        with pytest.raises(NonCanonicalizable):
            canonical_json_bytes({"x": b"bytes"})

    def test_rejects_unpaired_surrogate(self):
        with pytest.raises(NonCanonicalizable):
            canonical_json_bytes({"x": "\ud800"})

    def test_serialize_canonical_excludes_hmac(self):
        obj = {"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": dict(GOOD_ENVELOPE)}
        msg = parse_message(obj)
        full = serialize_canonical(msg)
        partial = serialize_canonical(msg, exclude_hmac=True)
        assert b'"hmac"' in full
        assert b'"hmac"' not in partial
        # everything else identical
        without = dict(GOOD_ENVELOPE)
        without.pop("hmac")
        assert partial == canonical_json_bytes(
            {"jsonrpc": "2.0", "id": 1, "method": "ping", "mcpsec": without}
        )


# Strategy for JSON values the wire can carry.
_json_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**53), max_value=2**53),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(),
)
json_values = st.recursive(
    _json_scalars,
    lambda children: st.one_of(
        st.lists(children, max_size=4), st.dictionaries(st.text(), children, max_size=4)
    ),
    max_leaves=20,
)


class TestProperties:
    @given(json_values)
    @settings(max_examples=300, deadline=None)
    def test_canonical_matches_oracle(self, value):
        assert canonical_json_bytes(value) == oracles.canonical_bytes(value)

    @given(json_values)
    @settings(max_examples=200, deadline=None)
    def test_canonical_round_trips(self, value):
        data = canonical_json_bytes(value)
        assert json.loads(data) == value

    @given(json_values)
    @settings(max_examples=200, deadline=None)
    def test_canonical_is_fixed_point(self, value):
        # reserializing the parse of canonical bytes yields the same bytes
        data = canonical_json_bytes(value)
        assert canonical_json_bytes(json.loads(data)) == data

    @given(
        st.dictionaries(st.text(min_size=1), _json_scalars, min_size=1, max_size=5),
        st.integers(min_value=0, max_value=10**6),
    )
    @settings(max_examples=150, deadline=None)
    def test_message_round_trip(self, params, msg_id):
        msg = make_request("tools/call", params=params, msg_id=msg_id)
        reparsed = parse_message(canonical_json_bytes(msg.to_obj()))
        assert reparsed.kind is MessageKind.REQUEST
        assert reparsed.id == msg_id
        assert reparsed.params == params
        assert serialize_canonical(reparsed) == serialize_canonical(msg)


class TestBuilders:
    def test_request_requires_id(self):
        with pytest.raises(ValueError):
            make_request("ping")

    def test_error_response_shape(self):
        msg = make_error_response(7, -32001, "blocked", data={"reason": "cap"})
        obj = msg.to_obj()
        assert obj["error"] == {"code": -32001, "message": "blocked", "data": {"reason": "cap"}}
        assert parse_message(obj).kind is MessageKind.RESPONSE

    def test_notification_has_no_id(self):
        assert "id" not in make_notification("ping").to_obj()

    def test_response_round_trip(self):
        msg = make_response("id-1", {"content": []})
        assert parse_message(msg.to_obj()).result == {"content": []}


class TestFraming:
    def test_reads_frames_in_order(self):
        stream = io.BytesIO(b'{"a":1}\n{"b":2}\r\n{"c":3}\n')
        reader = FrameReader(stream)
        assert reader.read_frame() == b'{"a":1}'
        assert reader.read_frame() == b'{"b":2}'
        assert reader.read_frame() == b'{"c":3}'
        with pytest.raises(StreamClosed):
            reader.read_frame()

    def test_final_frame_without_newline(self):
        reader = FrameReader(io.BytesIO(b'{"a":1}'))
        assert reader.read_frame() == b'{"a":1}'
        with pytest.raises(StreamClosed):
            reader.read_frame()

    def test_oversized_frame_rejected_stream_survives(self):
        big = b"x" * 300
        stream = io.BytesIO(big + b"\n" + b'{"ok":1}\n')
        reader = FrameReader(stream, max_frame_bytes=100)
        with pytest.raises(FrameTooLarge):
            reader.read_frame()
        assert reader.read_frame() == b'{"ok":1}'

    def test_oversized_unterminated_frame(self):
        stream = io.BytesIO(b"y" * 500)
        reader = FrameReader(stream, max_frame_bytes=100)
        with pytest.raises(FrameTooLarge):
            reader.read_frame()

    def test_default_limit_is_4mib(self):
        payload = b"z" * (4 * 1024 * 1024 + 1)
        reader = FrameReader(io.BytesIO(payload + b"\n"))
        with pytest.raises(FrameTooLarge):
            reader.read_frame()

    def test_exactly_at_limit_passes(self):
        payload = b"z" * 100
        reader = FrameReader(io.BytesIO(payload + b"\n"), max_frame_bytes=100)
        assert reader.read_frame() == payload

    def test_write_frame_rejects_newline(self):
        with pytest.raises(ValueError):
            write_frame(io.BytesIO(), b"a\nb")

    def test_write_then_read(self):
        buf = io.BytesIO()
        write_frame(buf, b'{"x":1}')
        buf.seek(0)
        assert FrameReader(buf).read_frame() == b'{"x":1}'


class TestEnvelopeObjects:
    def test_envelope_round_trip(self):
        env = McpSecEnvelope.from_obj(dict(GOOD_ENVELOPE))
        assert env.to_obj() == GOOD_ENVELOPE

    def test_transparency_modulo_envelope(self):
        # Stripping the envelope from a signed message leaves exactly the
        # message that was originally wrapped.
        body = {"jsonrpc": "2.0", "id": 3, "method": "resources/read",
                "params": {"uri": "file:///x"}}
        signed = dict(body)
        signed["mcpsec"] = dict(GOOD_ENVELOPE)
        msg = parse_message(signed)
        assert msg.to_obj(include_envelope=False) == body
