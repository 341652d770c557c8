"""Protocol message terms.

A term is an immutable tree built from participant names, nonces, keys and
user data, combined by pairing and by encryption under one of four function
classes (``sk``, ``pk``, ``h``, ``hmac``).  Terms are plain frozen
dataclasses, so structural equality and hashing come for free.

The textual notation mirrors the way protocol messages are usually written::

    {A,B,Na,K}sk(Kab)
    {{A,Na}h}pk(PKa),A,Na

Comma lists desugar to left-nested pairs.  Identifiers are resolved through a
:class:`SymbolTable`.
"""

from __future__ import annotations

import enum
import os
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterator, Optional, Union

from .errors import (
    InvalidKeyArg,
    MissingKeyArg,
    TermError,
    TermSyntaxError,
    UnboundIdentifier,
    UnexpectedKeyArg,
)

MIN_NONCE_OCTETS = 8
DEFAULT_NONCE_OCTETS = 16

ENCODING_HINTS = ("base64Binary", "hexBinary")


class FuncName(str, enum.Enum):
    SK = "sk"
    PK = "pk"
    H = "h"
    HMAC = "hmac"

    @property
    def takes_key(self) -> bool:
        return self is not FuncName.H

    def __str__(self):
        return self.value


# -- name kinds ----------------------------------------------------------------

def _require_text(owner, **fields):
    for fname, value in fields.items():
        if not isinstance(value, str) or not value:
            raise TermError(f"{owner}.{fname} must be non-empty text")


@dataclass(frozen=True)
class Distinguished:
    organization: str
    organizational_unit: str
    common_name: str
    country: str

    def __post_init__(self):
        _require_text("Distinguished", organization=self.organization,
                      organizational_unit=self.organizational_unit,
                      common_name=self.common_name, country=self.country)


@dataclass(frozen=True)
class UserDomain:
    user: str
    domain: str

    def __post_init__(self):
        _require_text("UserDomain", user=self.user, domain=self.domain)


@dataclass(frozen=True)
class IpV4:
    address: str

    def __post_init__(self):
        _require_text("IpV4", address=self.address)


@dataclass(frozen=True)
class IpV6:
    address: str

    def __post_init__(self):
        _require_text("IpV6", address=self.address)


@dataclass(frozen=True)
class Domain:
    domain: str

    def __post_init__(self):
        _require_text("Domain", domain=self.domain)


@dataclass(frozen=True)
class Plain:
    name: str

    def __post_init__(self):
        _require_text("Plain", name=self.name)


NameKind = Union[Distinguished, UserDomain, IpV4, IpV6, Domain, Plain]


# -- nonces, keys, user data ---------------------------------------------------

@dataclass(frozen=True)
class RandomNonce:
    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) < MIN_NONCE_OCTETS:
            raise TermError(f"random nonces need at least {MIN_NONCE_OCTETS} octets")


@dataclass(frozen=True)
class TimestampNonce:
    instant: datetime

    def __post_init__(self):
        t = self.instant
        if t.tzinfo is None or t.utcoffset().total_seconds() != 0:
            raise TermError("timestamps must be timezone-aware UTC instants")
        if t.microsecond % 1000:
            raise TermError("timestamps carry millisecond precision")

    @classmethod
    def now(cls, clock: Callable[[], datetime] | None = None) -> "TimestampNonce":
        t = clock() if clock else datetime.now(timezone.utc)
        return cls(t.astimezone(timezone.utc).replace(microsecond=t.microsecond // 1000 * 1000))


Nonce = Union[RandomNonce, TimestampNonce]


@dataclass(frozen=True)
class KeyMaterial:
    value: bytes
    encoding_hint: str = "base64Binary"
    # protocol-local identifier; never part of the key's identity
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if not isinstance(self.value, bytes) or not self.value:
            raise TermError("key material must be non-empty octets")
        if self.encoding_hint not in ENCODING_HINTS:
            raise TermError(f"encoding hint must be one of {ENCODING_HINTS}")

    def relabel(self, label: str) -> "KeyMaterial":
        return KeyMaterial(self.value, self.encoding_hint, label)


@dataclass(frozen=True)
class UserData:
    content: Union[bytes, str]
    media_label: str = "application/octet-stream"
    empty: bool = False

    def __post_init__(self):
        if not isinstance(self.content, (bytes, str)):
            raise TermError("user data content must be octets or text")
        if not self.content and not self.empty:
            raise TermError("empty user data must be flagged with empty=True")
        if self.content and self.empty:
            raise TermError("user data flagged empty carries content")


# -- terms -----------------------------------------------------------------------

@dataclass(frozen=True)
class Name:
    kind: NameKind


@dataclass(frozen=True)
class NonceTerm:
    nonce: Nonce


@dataclass(frozen=True)
class KeyTerm:
    key: KeyMaterial


@dataclass(frozen=True)
class Data:
    data: UserData


@dataclass(frozen=True)
class Pair:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Slot:
    """Placeholder leaf used only in protocol templates."""

    ident: str
    position: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class Sealed:
    """A ciphertext the holder cannot open, kept verbatim so it can be forwarded.

    ``block`` is the :class:`soapsec.envelope.EncryptedBlock` as received;
    ``placement`` records whether it travelled in the header or the body.
    """

    block: object
    placement: str = field(default="H", compare=False)


@dataclass(frozen=True)
class Enc:
    payload: "Term"
    func: FuncName
    key_arg: Optional["Term"] = None

    def __post_init__(self):
        func = FuncName(self.func)
        object.__setattr__(self, "func", func)
        if func.takes_key:
            if self.key_arg is None:
                raise MissingKeyArg(f"{func.value} needs a key argument")
            if not isinstance(self.key_arg, (KeyTerm, Name, Slot)):
                raise InvalidKeyArg(f"{func.value} key argument must be a key or a name, "
                                    f"got {type(self.key_arg).__name__}")
        elif self.key_arg is not None:
            raise UnexpectedKeyArg("h takes no key argument")


Term = Union[Name, NonceTerm, KeyTerm, Data, Pair, Enc, Slot, Sealed]
LEAF_TYPES = (Name, NonceTerm, KeyTerm, Data, Slot, Sealed)


def pair(left: Term, right: Term) -> Pair:
    return Pair(left, right)


def seq(*items: Term) -> Term:
    """Left-nested pairing of one or more terms: ``seq(a, b, c) == ((a, b), c)``."""
    if not items:
        raise TermError("seq() needs at least one term")
    out = items[0]
    for item in items[1:]:
        out = Pair(out, item)
    return out


def encrypt_term(payload: Term, func, key_arg: Optional[Term] = None) -> Enc:
    return Enc(payload, FuncName(func), key_arg)


def term_equal(a: Term, b: Term) -> bool:
    return a == b


def flatten(t: Term) -> list[Term]:
    """Items of the left spine of a pair chain, in order."""
    items = []
    while isinstance(t, Pair):
        items.append(t.right)
        t = t.left
    items.append(t)
    items.reverse()
    return items


def renest(t: Term) -> Term:
    """Canonical left-nested form: every pair chain is rebuilt left-associatively."""
    if isinstance(t, Pair):
        parts = []
        stack = [t]
        while stack:
            node = stack.pop()
            if isinstance(node, Pair):
                stack.append(node.right)
                stack.append(node.left)
            else:
                parts.append(renest(node))
        return seq(*parts)
    if isinstance(t, Enc):
        return Enc(renest(t.payload), t.func, t.key_arg)
    return t


def walk(t: Term) -> Iterator[Term]:
    """Pre-order traversal, key arguments included."""
    stack = [t]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Pair):
            stack.append(node.right)
            stack.append(node.left)
        elif isinstance(node, Enc):
            if node.key_arg is not None:
                stack.append(node.key_arg)
            stack.append(node.payload)


def leaves(t: Term, *, key_args: bool = True) -> list[Term]:
    out = []
    stack = [t]
    while stack:
        node = stack.pop()
        if isinstance(node, Pair):
            stack.append(node.right)
            stack.append(node.left)
        elif isinstance(node, Enc):
            if key_args and node.key_arg is not None:
                stack.append(node.key_arg)
            stack.append(node.payload)
        else:
            out.append(node)
    return out


def term_size(t: Term) -> int:
    """Node count of the term tree."""
    return sum(1 for _ in walk(t))


def term_depth(t: Term) -> int:
    if isinstance(t, Pair):
        return 1 + max(term_depth(t.left), term_depth(t.right))
    if isinstance(t, Enc):
        inner = term_depth(t.payload)
        if t.key_arg is not None:
            inner = max(inner, term_depth(t.key_arg))
        return 1 + inner
    return 1


# -- symbol tables ---------------------------------------------------------------

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_']*")

SYMBOL_KINDS = ("name", "dn", "userdomain", "ipv4", "ipv6", "domain", "nonce",
                "timestamp", "key", "data", "pubkey", "privkey", "dhkey")


@dataclass(frozen=True)
class SymbolDecl:
    ident: str
    kind: str
    literal: Optional[str] = None


def parse_symbol_lines(text: str) -> list[SymbolDecl]:
    """Parse the ``identifier = kind [literal]`` sidecar format."""
    decls = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        ident, sep, rest = line.partition("=")
        ident = ident.strip()
        if not sep or not IDENT_RE.fullmatch(ident):
            raise TermError(f"line {lineno}: expected 'identifier = kind', got {raw!r}")
        kind, _, literal = rest.strip().partition(" ")
        if kind not in SYMBOL_KINDS:
            raise TermError(f"line {lineno}: unknown kind {kind!r}")
        decls.append(SymbolDecl(ident, kind, literal.strip() or None))
    return decls


def name_from_literal(kind: str, literal: Optional[str], ident: str) -> Name:
    if kind == "name":
        return Name(Plain(literal or ident))
    if literal is None:
        raise TermError(f"{ident}: kind {kind!r} needs a literal value")
    if kind == "dn":
        parts = literal.split("/")
        if len(parts) != 4:
            raise TermError(f"{ident}: distinguished names are written O/OU/CN/C")
        return Name(Distinguished(*(p.strip() for p in parts)))
    if kind == "userdomain":
        user, at, domain = literal.partition("@")
        if not at:
            raise TermError(f"{ident}: user-domain names are written user@domain")
        return Name(UserDomain(user, domain))
    return Name({"ipv4": IpV4, "ipv6": IpV6, "domain": Domain}[kind](literal))


class SymbolTable(Mapping):
    """Identifier to leaf-term bindings, with reverse lookup for printing.

    ``inverse`` pairs asymmetric key identifiers (public <-> private) and
    ``secrets`` keeps private halves of generated Diffie-Hellman pairs.
    """

    def __init__(self, entries=None, kinds=None):
        self._entries: dict[str, Term] = dict(entries or {})
        self.kinds: dict[str, str] = dict(kinds or {})
        self.inverse: dict[str, str] = {}
        self.secrets: dict[str, object] = {}
        self._reverse: Optional[dict] = None

    def __getitem__(self, ident):
        return self._entries[ident]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def bind(self, ident: str, value: Term, kind: Optional[str] = None):
        if not IDENT_RE.fullmatch(ident):
            raise TermError(f"bad identifier {ident!r}")
        self._entries[ident] = value
        if kind:
            self.kinds[ident] = kind
        self._reverse = None

    def ident_for(self, value: Term) -> Optional[str]:
        if self._reverse is None:
            rev = {}
            for ident, v in self._entries.items():
                rev.setdefault(v, ident)
            self._reverse = rev
        return self._reverse.get(value)

    @classmethod
    def load(cls, text: str, provider=None,
             randbytes: Callable[[int], bytes] = os.urandom,
             key_octets: int = 16) -> "SymbolTable":
        """Materialize a sidecar file into concrete values.

        Nonces and keys without a literal are drawn from ``randbytes``;
        ``pubkey``/``privkey``/``dhkey`` kinds need a crypto ``provider``.
        """
        return cls.from_decls(parse_symbol_lines(text), provider, randbytes, key_octets)

    @classmethod
    def from_decls(cls, decls, provider=None,
                   randbytes: Callable[[int], bytes] = os.urandom,
                   key_octets: int = 16) -> "SymbolTable":
        table = cls()
        decls = list(decls)
        privs = {d.literal: d for d in decls if d.kind == "privkey"}
        for d in decls:
            if d.kind in ("name", "dn", "userdomain", "ipv4", "ipv6", "domain"):
                value = name_from_literal(d.kind, d.literal, d.ident)
            elif d.kind == "nonce":
                raw = bytes.fromhex(d.literal) if d.literal else randbytes(DEFAULT_NONCE_OCTETS)
                value = NonceTerm(RandomNonce(raw))
            elif d.kind == "timestamp":
                if d.literal:
                    instant = datetime.fromisoformat(d.literal.replace("Z", "+00:00"))
                    value = NonceTerm(TimestampNonce(instant))
                else:
                    value = NonceTerm(TimestampNonce.now())
            elif d.kind == "key":
                raw = bytes.fromhex(d.literal) if d.literal else randbytes(key_octets)
                value = KeyTerm(KeyMaterial(raw, "base64Binary", d.ident))
            elif d.kind == "data":
                value = Data(UserData(d.literal or d.ident, "text/plain"))
            elif d.kind == "pubkey":
                if provider is None:
                    raise TermError(f"{d.ident}: asymmetric keys need a crypto provider")
                pair_ = provider.generate_keypair()
                value = KeyTerm(KeyMaterial(pair_.public_part, "base64Binary", d.ident))
                mate = privs.get(d.ident)
                if mate is not None:
                    table.bind(mate.ident, KeyTerm(KeyMaterial(pair_.private_part, "base64Binary",
                                                               mate.ident)), "privkey")
                    table.inverse[d.ident] = mate.ident
                    table.inverse[mate.ident] = d.ident
            elif d.kind == "privkey":
                if d.literal is None or d.literal not in {x.ident for x in decls}:
                    raise TermError(f"{d.ident}: privkey must name its public key identifier")
                continue
            elif d.kind == "dhkey":
                if provider is None:
                    raise TermError(f"{d.ident}: DH keys need a crypto provider")
                pair_ = provider.dh_generate()
                value = KeyTerm(KeyMaterial(pair_.public_part, "base64Binary", d.ident))
                table.secrets[d.ident] = pair_
            table.bind(d.ident, value, d.kind)
        return table


# -- notation --------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_']*)|(?P<punct>[{}(),]))")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks: list[tuple[str, str, int]] = []
        pos = 0
        while True:
            m = _TOKEN_RE.match(text, pos)
            if not m:
                rest = text[pos:]
                if rest.strip():
                    raise TermSyntaxError(f"unexpected character {rest.strip()[0]!r}",
                                          pos + len(rest) - len(rest.lstrip()))
                break
            kind = "ident" if m.group("ident") else "punct"
            self.toks.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else ("eof", "", len(self.text))

    def take(self, value=None):
        tok = self.peek()
        if value is not None and tok[1] != value:
            shown = tok[1] or "end of input"
            raise TermSyntaxError(f"expected {value!r}, found {shown!r}", tok[2])
        if tok[0] == "eof":
            raise TermSyntaxError("unexpected end of input", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Term:
        t = self.sequence()
        tok = self.peek()
        if tok[0] != "eof":
            raise TermSyntaxError(f"unexpected {tok[1]!r}", tok[2])
        return t

    def sequence(self) -> Term:
        t = self.item()
        while self.peek()[1] == ",":
            self.take(",")
            t = Pair(t, self.item())
        return t

    def item(self) -> Term:
        kind, value, pos = self.peek()
        if kind == "ident":
            self.take()
            return Slot(value, pos)
        if value == "(":
            self.take("(")
            t = self.sequence()
            self.take(")")
            return t
        if value == "{":
            self.take("{")
            payload = self.sequence()
            self.take("}")
            fkind, fname, fpos = self.peek()
            if fkind != "ident" or fname not in {f.value for f in FuncName}:
                raise TermSyntaxError("expected a function name (sk, pk, h, hmac)", fpos)
            self.take()
            key_arg = None
            if self.peek()[1] == "(":
                self.take("(")
                kkind, kval, kpos = self.peek()
                if kkind != "ident":
                    raise TermSyntaxError("expected a key identifier", kpos)
                self.take()
                self.take(")")
                key_arg = Slot(kval, kpos)
            return Enc(payload, FuncName(fname), key_arg)
        raise TermSyntaxError(f"unexpected {value or 'end of input'!r}", pos)


def parse_template(text: str) -> Term:
    """Parse notation into a term whose leaves are :class:`Slot` placeholders."""
    return _Parser(text).parse()


def substitute(template: Term, table: Mapping) -> Term:
    if isinstance(template, Slot):
        try:
            return table[template.ident]
        except KeyError:
            raise UnboundIdentifier(template.ident, template.position) from None
    if isinstance(template, Pair):
        # flatten() follows only the left spine, so seq() rebuilds the same shape
        return seq(*(substitute(x, table) for x in flatten(template)))
    if isinstance(template, Enc):
        key_arg = None if template.key_arg is None else substitute(template.key_arg, table)
        return Enc(substitute(template.payload, table), template.func, key_arg)
    return template


def parse_term(text: str, table: Mapping) -> Term:
    return substitute(parse_template(text), table)


def print_term(t: Term, table: Optional[SymbolTable] = None) -> str:
    """Canonical notation; the exact inverse of :func:`parse_term`."""
    if isinstance(t, Pair):
        parts = []
        for item in flatten(t):
            text = print_term(item, table)
            parts.append(f"({text})" if isinstance(item, Pair) else text)
        return ",".join(parts)
    if isinstance(t, Enc):
        out = "{" + print_term(t.payload, table) + "}" + t.func.value
        if t.key_arg is not None:
            out += "(" + _leaf_ident(t.key_arg, table) + ")"
        return out
    return _leaf_ident(t, table)


def _leaf_ident(t: Term, table: Optional[SymbolTable]) -> str:
    if isinstance(t, Slot):
        return t.ident
    if table is not None:
        ident = table.ident_for(t) if isinstance(table, SymbolTable) else next(
            (k for k, v in table.items() if v == t), None)
        if ident is not None:
            return ident
    if isinstance(t, Name) and isinstance(t.kind, Plain) and IDENT_RE.fullmatch(t.kind.name):
        return t.kind.name
    if isinstance(t, KeyTerm) and IDENT_RE.fullmatch(t.key.label):
        return t.key.label
    raise TermError(f"no identifier for leaf {t!r}")
