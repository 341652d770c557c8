from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soapsec.errors import (
    InvalidKeyArg,
    MissingKeyArg,
    TermError,
    TermSyntaxError,
    UnboundIdentifier,
    UnexpectedKeyArg,
)
from soapsec.terms import (
    Data,
    Distinguished,
    Domain,
    Enc,
    FuncName,
    IpV4,
    KeyMaterial,
    KeyTerm,
    Name,
    NonceTerm,
    Pair,
    Plain,
    RandomNonce,
    Slot,
    SymbolTable,
    TimestampNonce,
    UserData,
    UserDomain,
    flatten,
    leaves,
    pair,
    parse_symbol_lines,
    parse_template,
    parse_term,
    print_term,
    renest,
    seq,
    term_depth,
    term_size,
    walk,
)

A = Name(Plain("A"))
B = Name(Plain("B"))
NA = NonceTerm(RandomNonce(bytes(range(16))))
K = KeyTerm(KeyMaterial(b"k" * 16, label="Kab"))


@pytest.fixture
def table():
    t = SymbolTable()
    t.bind("A", A, "name")
    t.bind("B", B, "name")
    t.bind("Na", NA, "nonce")
    t.bind("Kab", K, "key")
    t.bind("M", Data(UserData("hello", "text/plain")), "data")
    return t


class TestConstruction:
    def test_pair(self):
        assert pair(A, NA) == Pair(A, NA)

    def test_seq_left_nests(self):
        assert seq(A, B, NA) == Pair(Pair(A, B), NA)
        assert pair(pair(A, B), NA) == seq(A, B, NA)

    def test_seq_single_and_empty(self):
        assert seq(A) is A
        with pytest.raises(TermError):
            seq()

    def test_enc_keys(self):
        assert Enc(NA, FuncName.SK, K).func is FuncName.SK
        assert Enc(NA, "h").func is FuncName.H
        with pytest.raises(MissingKeyArg):
            Enc(NA, FuncName.SK)
        with pytest.raises(UnexpectedKeyArg):
            Enc(NA, FuncName.H, K)
        with pytest.raises(InvalidKeyArg):
            Enc(NA, FuncName.PK, NA)

    def test_name_as_key_argument(self):
        assert Enc(NA, FuncName.PK, B).key_arg == B

    def test_name_kinds_need_text(self):
        for bad in (lambda: Plain(""), lambda: IpV4(""), lambda: Domain(""),
                    lambda: UserDomain("u", ""), lambda: Distinguished("o", "", "cn", "c")):
            with pytest.raises(TermError):
                bad()

    def test_nonces(self):
        with pytest.raises(TermError):
            RandomNonce(b"short")
        with pytest.raises(TermError):
            TimestampNonce(datetime(2024, 1, 1))
        with pytest.raises(TermError):
            TimestampNonce(datetime(2024, 1, 1, 0, 0, 0, 1500, tzinfo=timezone.utc))
        cet = timezone(timedelta(hours=1))
        with pytest.raises(TermError):
            TimestampNonce(datetime(2024, 1, 1, tzinfo=cet))

    def test_timestamp_now_truncates(self):
        fixed = datetime(2024, 5, 6, 7, 8, 9, 123456, tzinfo=timezone.utc)
        ts = TimestampNonce.now(lambda: fixed)
        assert ts.instant.microsecond == 123000

    def test_user_data_empty_flag(self):
        assert UserData(b"", empty=True).empty
        with pytest.raises(TermError):
            UserData(b"")
        with pytest.raises(TermError):
            UserData(b"x", empty=True)
        with pytest.raises(TermError):
            UserData(12)

    def test_key_label_outside_identity(self):
        a = KeyTerm(KeyMaterial(b"x" * 16, label="K1"))
        b = KeyTerm(KeyMaterial(b"x" * 16, label="K2"))
        assert a == b and hash(a) == hash(b)
        assert a.key.relabel("K9").label == "K9"
        with pytest.raises(TermError):
            KeyMaterial(b"x", "octal")

    def test_immutable(self):
        with pytest.raises(AttributeError):
            A.kind = None


class TestTraversal:
    def test_flatten_left_spine(self):
        t = seq(A, Pair(B, NA), K)
        assert flatten(t) == [A, Pair(B, NA), K]

    def test_renest(self):
        assert renest(Pair(A, Pair(B, NA))) == seq(A, B, NA)
        assert renest(Enc(Pair(A, Pair(B, NA)), FuncName.H)) == Enc(seq(A, B, NA), FuncName.H)

    def test_walk_and_leaves(self):
        t = seq(A, Enc(NA, FuncName.SK, K))
        assert list(walk(t))[0] == t
        assert leaves(t) == [A, NA, K]
        assert leaves(t, key_args=False) == [A, NA]
        assert term_size(t) == 5

    def test_depth(self):
        assert term_depth(A) == 1
        assert term_depth(seq(A, B)) == 2
        assert term_depth(Enc(seq(A, B), FuncName.H)) == 3


class TestNotation:
    def test_parse_simple(self, table):
        assert parse_term("A,Na", table) == Pair(A, NA)
        assert parse_term("{A,Na}sk(Kab)", table) == Enc(Pair(A, NA), FuncName.SK, K)
        assert parse_term("{Na}h", table) == Enc(NA, FuncName.H)

    def test_parens_group(self, table):
        assert parse_term("A,(B,Na)", table) == Pair(A, Pair(B, NA))
        assert print_term(Pair(A, Pair(B, NA)), table) == "A,(B,Na)"

    def test_whitespace_tolerated(self, table):
        assert parse_term(" { A , Na } sk ( Kab ) ", table) == parse_term("{A,Na}sk(Kab)", table)

    def test_template_slots(self):
        t = parse_template("{A,Na}sk(Kab)")
        assert t.payload == Pair(Slot("A"), Slot("Na"))
        assert t.key_arg == Slot("Kab")

    @pytest.mark.parametrize("text,pos", [
        ("A,", 2), ("{A}", 3), ("{A}sk(", 6), ("A B", 2), ("A;B", 1), ("{A}foo(K)", 3),
        ("(A", 2), ("", 0),
    ])
    def test_syntax_errors_carry_position(self, text, pos):
        with pytest.raises(TermSyntaxError) as err:
            parse_template(text)
        assert err.value.position == pos

    def test_missing_key_argument_in_notation(self):
        with pytest.raises(MissingKeyArg):
            parse_template("{A}sk")

    def test_unbound_identifier(self, table):
        with pytest.raises(UnboundIdentifier) as err:
            parse_term("A,Zed", table)
        assert err.value.position == 2

    def test_print_without_table_uses_labels(self):
        assert print_term(Enc(A, FuncName.SK, K)) == "{A}sk(Kab)"
        with pytest.raises(TermError):
            print_term(NA)


idents = st.sampled_from(["A", "B", "Na", "M"])


def _templates():
    leaf = idents

    def extend(inner):
        items = st.lists(inner, min_size=1, max_size=3)
        return st.one_of(
            st.lists(inner, min_size=2, max_size=3).map(lambda xs: ",".join(
                f"({x})" if "," in x and not x.startswith("{") else x for x in xs)),
            items.map(lambda xs: "{" + ",".join(
                f"({x})" if "," in x and not x.startswith("{") else x for x in xs) + "}sk(Kab)"),
            items.map(lambda xs: "{" + ",".join(
                f"({x})" if "," in x and not x.startswith("{") else x for x in xs) + "}h"),
        )

    return st.recursive(leaf, extend, max_leaves=10)


def _canonical(text: str, table) -> str:
    return print_term(parse_term(text, table), table)


class TestNotationRoundTrip:
    @settings(max_examples=300)
    @given(_templates())
    def test_print_parse_identity(self, text):
        t = SymbolTable({"A": A, "B": B, "Na": NA, "M": Data(UserData("m", "text/plain")),
                         "Kab": K})
        term = parse_term(text, t)
        printed = print_term(term, t)
        assert parse_term(printed, t) == term
        assert print_term(parse_term(printed, t), t) == printed


class TestSymbolFile:
    def test_parse_lines(self):
        decls = parse_symbol_lines("A = name\n# comment\nB = ipv4 10.0.0.1  # trailing\n")
        assert [(d.ident, d.kind, d.literal) for d in decls] == [
            ("A", "name", None), ("B", "ipv4", "10.0.0.1")]

    @pytest.mark.parametrize("line", ["A name", "1A = name", "A = widget"])
    def test_bad_lines(self, line):
        with pytest.raises(TermError):
            parse_symbol_lines(line)

    def test_load_kinds(self):
        t = SymbolTable.load("\n".join([
            "A = dn Acme/Research/alice/DE", "B = userdomain bob@example.org",
            "C = domain example.org", "D = ipv6 2001:db8:0:0:0:0:0:1", "Na = nonce 0011223344556677",
            "T = timestamp 2024-01-02T03:04:05.678Z", "K = key 000102030405060708090a0b0c0d0e0f",
            "M = data hi"]))
        assert t["A"] == Name(Distinguished("Acme", "Research", "alice", "DE"))
        assert t["B"] == Name(UserDomain("bob", "example.org"))
        assert t["Na"] == NonceTerm(RandomNonce(bytes.fromhex("0011223344556677")))
        assert t["T"].nonce.instant == datetime(2024, 1, 2, 3, 4, 5, 678000, tzinfo=timezone.utc)
        assert t["K"].key.label == "K"
        assert t["M"] == Data(UserData("hi", "text/plain"))
        assert t.ident_for(t["C"]) == "C"

    def test_asymmetric_kinds_need_provider(self):
        with pytest.raises(TermError):
            SymbolTable.load("PK = pubkey\nSK = privkey PK")

    def test_privkey_pairs_with_pubkey(self):
        from soapsec.crypto import CryptoProvider
        t = SymbolTable.load("PK = pubkey\nSK = privkey PK", CryptoProvider())
        assert t.inverse == {"PK": "SK", "SK": "PK"}
        assert CryptoProvider.is_private_key(t["SK"].key.value)
