"""Hypothesis strategies for leaf and compound terms."""

from datetime import datetime, timedelta, timezone

from hypothesis import strategies as st

from soapsec.terms import (
    Data,
    Distinguished,
    Domain,
    Enc,
    FuncName,
    IpV4,
    IpV6,
    KeyMaterial,
    KeyTerm,
    Name,
    Pair,
    NonceTerm,
    Plain,
    RandomNonce,
    TimestampNonce,
    UserData,
    UserDomain,
    seq,
)
from soapsec.envelope import items_of
from soapsec.tokens import validate_name

# characters XML 1.0 can carry, minus surrogates
xml_text = st.text(
    st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00￾￿",
                  min_codepoint=0x09).filter(lambda c: c in "\t\n\r" or ord(c) >= 0x20),
    min_size=1, max_size=24)

_word = st.from_regex(r"[A-Za-z0-9]{1,8}", fullmatch=True)
# the Domain pattern rejects some dotted names (e.g. a one-character middle label)
domains = st.lists(_word, min_size=2, max_size=4).map(".".join).filter(
    lambda d: validate_name("Domain", d))
userdomain_domains = st.lists(_word, min_size=1, max_size=4).map(".".join)
ipv4s = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
ipv6s = st.lists(st.from_regex(r"[0-9a-fA-F]{1,4}", fullmatch=True), min_size=8,
                 max_size=8).map(":".join)

names = st.one_of(
    xml_text.map(lambda s: Name(Plain(s))),
    st.tuples(xml_text, xml_text, xml_text, xml_text).map(
        lambda t: Name(Distinguished(*t))),
    st.tuples(xml_text, userdomain_domains).map(lambda t: Name(UserDomain(*t))),
    ipv4s.map(lambda s: Name(IpV4(s))),
    ipv6s.map(lambda s: Name(IpV6(s))),
    domains.map(lambda s: Name(Domain(s))),
)

_epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
timestamps = st.integers(0, 4102444800000).map(
    lambda ms: TimestampNonce(_epoch + timedelta(milliseconds=ms)))

nonces = st.one_of(
    st.binary(min_size=8, max_size=40).map(lambda b: NonceTerm(RandomNonce(b))),
    timestamps.map(NonceTerm),
)

keys = st.tuples(st.binary(min_size=1, max_size=64),
                 st.sampled_from(("base64Binary", "hexBinary"))).map(
    lambda t: KeyTerm(KeyMaterial(*t)))

leaf_tokens = st.one_of(names, nonces, keys)

user_data = st.one_of(
    st.binary(min_size=1, max_size=64).map(lambda b: Data(UserData(b))),
    xml_text.map(lambda s: Data(UserData(s, "text/plain"))),
)


def envelope_terms(header_pool, body_pool, sk_keys, pk_keys, sign_keys, max_depth=4):
    """Compound terms of n-ary depth <= ``max_depth`` over fixed leaf pools.

    Encrypted payloads never mix user data with tokens, and h/hmac payloads
    stay flat, mirroring what an envelope can carry.
    """
    header_leaf = st.sampled_from(header_pool)
    body_leaf = st.sampled_from(body_pool)
    keyed = st.one_of(
        st.tuples(st.just(FuncName.SK), st.sampled_from(sk_keys)),
        st.tuples(st.just(FuncName.PK), st.sampled_from(pk_keys)),
        st.tuples(st.just(FuncName.PK), st.sampled_from(sign_keys)),
    )

    def payload(leaf, depth):
        # a payload of depth <= depth: one item, or a sequence one level shallower
        single = level(leaf, depth)
        if depth < 2:
            return single
        return st.one_of(single, st.lists(level(leaf, depth - 1), min_size=2, max_size=3)
                         .map(lambda xs: seq(*xs)))

    def digest(leaf, depth):
        items = leaf
        if depth >= 2:
            items = st.one_of(leaf, st.lists(leaf, min_size=2, max_size=3).map(
                lambda xs: seq(*xs)))
        return st.one_of(
            items.map(lambda p: Enc(p, FuncName.H)),
            st.tuples(items, st.sampled_from(sk_keys)).map(
                lambda t: Enc(t[0], FuncName.HMAC, t[1])),
        )

    def level(leaf, depth):
        if depth <= 1:
            return leaf
        return st.one_of(
            leaf,
            digest(leaf, depth - 1),
            st.tuples(payload(leaf, depth - 1), keyed).map(lambda t: Enc(t[0], *t[1])),
        )

    def top(depth):
        part = st.one_of(level(header_leaf, depth - 1), level(body_leaf, depth - 1))
        return st.lists(part, min_size=1, max_size=4).map(lambda xs: seq(*xs))

    return top(max_depth)


def nary_depth(t) -> int:
    """Depth with a whole sequence counted as one level."""
    if isinstance(t, Pair):
        return 1 + max(nary_depth(i) for i in items_of(t))
    if isinstance(t, Enc):
        return 1 + nary_depth(t.payload)
    return 1
