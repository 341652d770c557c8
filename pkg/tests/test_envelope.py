import base64
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings

from soapsec import xmlutil as X
from soapsec.crypto import CryptoProvider
from soapsec.envelope import (
    BODY,
    HEADER,
    EncryptedBlock,
    Envelope,
    KeyContext,
    UnresolvedDigest,
    build_envelope,
    envelope_size,
    items_of,
    open_envelope,
    parse_envelope,
    parse_envelope_xml,
)
from soapsec.errors import (
    DecryptFailure,
    EnvelopeError,
    MalformedEnvelope,
    ManifestMismatch,
    MixedPlacement,
    UnresolvedKey,
)
from soapsec.terms import (
    Data,
    Enc,
    FuncName,
    IpV4,
    KeyMaterial,
    KeyTerm,
    Name,
    NonceTerm,
    Plain,
    RandomNonce,
    Sealed,
    TimestampNonce,
    UserData,
    renest,
    seq,
)
from strategies import envelope_terms, nary_depth

P = CryptoProvider()
PAIR = P.generate_keypair()
A = Name(Plain("alice"))
B = Name(IpV4("192.0.2.7"))
NA = NonceTerm(RandomNonce(bytes(range(16))))
TS = NonceTerm(TimestampNonce(datetime(2024, 6, 1, 12, 0, tzinfo=timezone.utc)))
K1 = KeyTerm(KeyMaterial(bytes(range(16)), label="K1"))
K2 = KeyTerm(KeyMaterial(bytes(range(16, 32)), label="K2"))
KX = KeyTerm(KeyMaterial(b"session-secret", "hexBinary", "Kx"))
PKB = KeyTerm(KeyMaterial(PAIR.public_part, label="PKb"))
SKB = KeyTerm(KeyMaterial(PAIR.private_part, label="SKb"))
M1 = Data(UserData(b"\x00\x01binary payload"))
M2 = Data(UserData("plain <text> & more", "text/plain"))

HEADER_POOL = [A, B, NA, TS, KX]
BODY_POOL = [M1, M2]


def _ctx(**over):
    kw = dict(provider=P, keys={"K1": K1, "K2": K2, "PKb": PKB, "SKb": SKB},
              inverse={"PKb": "SKb", "SKb": "PKb"}, known=HEADER_POOL + BODY_POOL)
    kw.update(over)
    return KeyContext(**kw)


CTX = _ctx()


def _flip(data: bytes, i: int) -> bytes:
    return data[:i] + bytes([data[i] ^ 1]) + data[i + 1:]


class TestLayout:
    def test_placement(self):
        env = build_envelope(seq(A, M1, NA, Enc(M2, FuncName.SK, K1)), CTX)
        assert env.layout == (HEADER, BODY, HEADER, BODY)
        assert len(env.header_tokens) == 2 and len(env.body_parts) == 2

    def test_document_shape(self):
        root = build_envelope(seq(A, M1), CTX).to_element()
        assert root.tag == X.qn(X.SOAP_NS, "Envelope")
        header, body = list(root)
        sec = header[0]
        assert sec.get(X.qn(X.SOAP_NS, "mustUnderstand")) == "true"
        assert sec[0].tag == X.ext("MessageInfo")
        assert body[0].tag == X.ext("UserData")

    def test_string_writer_matches_canonical_tree(self):
        for t in (seq(A, B, NA, TS, KX, M1, M2),
                  seq(Enc(seq(A, NA), FuncName.SK, K1), Enc(M1, FuncName.PK, PKB)),
                  seq(Enc(seq(A, NA), FuncName.H), Enc(NA, FuncName.HMAC, K2)),
                  seq(Enc(Enc(A, FuncName.PK, SKB), FuncName.SK, K2), M2)):
            env = build_envelope(t, CTX)
            assert env.to_xml() == X.canonical(env.to_element())

    def test_size(self):
        env = build_envelope(seq(A, M2), CTX)
        assert envelope_size(env) == len(env.to_xml().encode("utf-8"))

    def test_mixed_payload_rejected(self):
        with pytest.raises(MixedPlacement):
            build_envelope(Enc(seq(A, M1), FuncName.SK, K1), CTX)

    def test_envelope_invariants(self):
        with pytest.raises(MixedPlacement):
            Envelope([M1.data], [], "id")
        with pytest.raises(EnvelopeError):
            Envelope([], [M1.data], "id", (HEADER,))

    def test_nested_digest_rejected(self):
        with pytest.raises(EnvelopeError):
            build_envelope(Enc(Enc(A, FuncName.SK, K1), FuncName.H), CTX)

    def test_unknown_key(self):
        stray = KeyTerm(KeyMaterial(bytes(16)))
        with pytest.raises(UnresolvedKey):
            build_envelope(Enc(A, FuncName.SK, stray), CTX)

    def test_name_as_key(self):
        ctx = _ctx(name_keys={B: "PKb"})
        env = build_envelope(Enc(NA, FuncName.PK, B), ctx)
        assert env.header_tokens[0].key_ref_type == "name"
        assert open_envelope(env, ctx) == Enc(NA, FuncName.PK, B)

    def test_message_id_from_randbytes(self):
        ctx = _ctx(randbytes=lambda n: bytes(n))
        assert build_envelope(A, ctx).message_id == "00000000-0000-4000-8000-000000000000"


class TestRoundTrip:
    @settings(max_examples=500)
    @given(envelope_terms(HEADER_POOL, BODY_POOL, [K1, K2], [PKB], [SKB], max_depth=4))
    def test_build_parse_identity(self, term):
        assert nary_depth(term) <= 4
        xml = build_envelope(term, CTX).to_bytes()
        assert parse_envelope(xml, CTX) == renest(term)

    def test_pair_renesting_is_the_only_change(self):
        from soapsec.terms import Pair
        t = Pair(A, Pair(NA, M1))
        back = parse_envelope(build_envelope(t, CTX).to_bytes(), CTX)
        assert back == seq(A, NA, M1) != t

    def test_hybrid_pk_payload(self):
        big = Data(UserData(bytes(5000)))
        t = Enc(big, FuncName.PK, PKB)
        assert parse_envelope(build_envelope(t, CTX).to_bytes(), CTX) == t

    def test_key_learned_inside_envelope(self):
        sender = _ctx()
        receiver = _ctx(keys={"PKb": PKB, "SKb": SKB})
        t = seq(Enc(seq(A, K1), FuncName.PK, PKB), Enc(NA, FuncName.SK, K1))
        assert parse_envelope(build_envelope(t, sender).to_bytes(), receiver) == t


class TestOpening:
    def test_opaque_blocks(self):
        receiver = _ctx(keys={})
        env = build_envelope(seq(A, Enc(M1, FuncName.SK, K1)), CTX)
        out = open_envelope(env, receiver, allow_opaque=True)
        sealed = items_of(out)[1]
        assert isinstance(sealed, Sealed) and sealed.placement == BODY
        with pytest.raises(UnresolvedKey):
            open_envelope(env, receiver)

    def test_sealed_block_forwards_verbatim(self):
        receiver = _ctx(keys={})
        env = build_envelope(Enc(NA, FuncName.SK, K1), CTX)
        sealed = open_envelope(env, receiver, allow_opaque=True)
        again = build_envelope(seq(A, sealed), receiver)
        assert again.header_tokens[1] == env.header_tokens[0]
        assert parse_envelope(again.to_bytes(), CTX) == seq(A, Enc(NA, FuncName.SK, K1))

    def test_unreproducible_digest(self):
        secret = NonceTerm(RandomNonce(b"unguessable"))
        env = build_envelope(Enc(secret, FuncName.H), CTX)
        with pytest.raises(UnresolvedDigest):
            open_envelope(env, CTX)

    def test_signature_is_checked(self):
        env = build_envelope(Enc(NA, FuncName.PK, SKB), CTX)
        blk = env.header_tokens[0]
        bad = EncryptedBlock(_flip(blk.ciphertext, len(blk.ciphertext) - 1), blk.func,
                             blk.algorithm_id, blk.key_ref, blk.inner_manifest)
        with pytest.raises(DecryptFailure):
            open_envelope(Envelope([bad], [], "m"), CTX)

    @pytest.mark.parametrize("func,key", [(FuncName.SK, K1), (FuncName.PK, PKB)])
    def test_ciphertext_tamper(self, func, key):
        env = build_envelope(Enc(seq(A, NA), func, key), CTX)
        blk = env.header_tokens[0]
        for i in (0, len(blk.ciphertext) // 2, len(blk.ciphertext) - 1):
            bad = EncryptedBlock(_flip(blk.ciphertext, i), blk.func, blk.algorithm_id,
                                 blk.key_ref, blk.inner_manifest)
            with pytest.raises(DecryptFailure):
                open_envelope(Envelope([bad], [], "m"), CTX)

    def test_manifest_is_authenticated(self):
        env = build_envelope(Enc(seq(A, NA), FuncName.SK, K1), CTX)
        blk = env.header_tokens[0]
        bad = EncryptedBlock(blk.ciphertext, blk.func, blk.algorithm_id, blk.key_ref,
                             ("UsernameToken",))
        with pytest.raises(DecryptFailure):
            open_envelope(Envelope([bad], [], "m"), CTX)

    def test_manifest_mismatch_under_valid_key(self):
        b = P.sk_encrypt(K1.key.value, f'<Plaintext xmlns="{X.EXT_NS}"></Plaintext>'.encode(),
                         b"sk|aes-128-gcm|K1|UsernameToken")
        blk = EncryptedBlock(b, FuncName.SK, "aes-128-gcm", "K1", ("UsernameToken",))
        with pytest.raises(ManifestMismatch):
            open_envelope(Envelope([blk], [], "m"), CTX)


class TestMalformed:
    @pytest.mark.parametrize("xml", [
        "<not-closed",
        f'<e:Envelope xmlns:e="{X.SOAP_NS}"/>',
        f'<e:Other xmlns:e="{X.SOAP_NS}"><e:Header/><e:Body/></e:Envelope>'.replace(
            "</e:Envelope>", "</e:Other>"),
        f'<e:Envelope xmlns:e="{X.SOAP_NS}"><e:Header/><e:Body/></e:Envelope>',
    ])
    def test_structure(self, xml):
        with pytest.raises(MalformedEnvelope):
            parse_envelope_xml(xml)

    def test_bad_token_is_malformed(self):
        xml = build_envelope(seq(B, M1), CTX).to_xml().replace("192.0.2.7", "no-ip")
        with pytest.raises(MalformedEnvelope):
            parse_envelope_xml(xml)

    def test_bad_layout(self):
        xml = build_envelope(seq(A, M1), CTX).to_xml().replace('Layout="H B"', 'Layout="H H"')
        with pytest.raises(MalformedEnvelope):
            parse_envelope_xml(xml)

    def test_bad_block_base64(self):
        xml = build_envelope(Enc(A, FuncName.SK, K1), CTX).to_xml()
        start = xml.index('Manifest="UsernameToken">') + len('Manifest="UsernameToken">')
        xml = xml[:start] + "*" + xml[start + 1:]
        with pytest.raises(MalformedEnvelope):
            parse_envelope_xml(xml)

    def test_user_data_in_header(self):
        xml = build_envelope(seq(A, M1), CTX).to_xml()
        ud = xml[xml.index("<UserData"):xml.index("</UserData>") + len("</UserData>")]
        xml = xml.replace(ud, "").replace("</wsse:Security>", ud + "</wsse:Security>")
        with pytest.raises(MalformedEnvelope):
            parse_envelope_xml(xml)

    def test_round_trip_preserves_bytes(self):
        env = build_envelope(seq(A, NA, Enc(M2, FuncName.SK, K2)), CTX)
        assert parse_envelope_xml(env.to_bytes()).to_xml() == env.to_xml()

    def test_user_data_encodings(self):
        env = build_envelope(seq(M1, M2), CTX)
        xml = env.to_xml()
        assert base64.b64encode(M1.data.content).decode() in xml
        assert "plain &lt;text&gt; &amp; more" in xml
