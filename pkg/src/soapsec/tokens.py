"""Security tokens: leaf terms to and from their XML elements.

Eight token schemas are supported.  Plain names ride on ``wsse:UsernameToken``,
random nonces on ``wsse:BinarySecurityToken`` and timestamps on
``wsu:Timestamp``; the remaining five live in the extension namespace.

Name validation reproduces the schema patterns exactly, laxities included
(``999.999.999.999`` is a valid IPv4 name, ``2001:db8::1`` is not a valid
IPv6 one).  Pass ``strict=True`` for RFC-grade checks instead.
"""

from __future__ import annotations

import base64
import binascii
import ipaddress
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import lru_cache

import regex

from . import xmlutil as X
from .errors import (
    BadTimestamp,
    MalformedBinary,
    PatternViolation,
    SchemaMismatch,
    TermError,
    UnsupportedTerm,
)
from .terms import (
    Distinguished,
    Domain,
    IpV4,
    IpV6,
    KeyMaterial,
    KeyTerm,
    Name,
    NonceTerm,
    Plain,
    RandomNonce,
    Term,
    TimestampNonce,
    UserDomain,
)

SCHEMA_IDS = ("UsernameToken", "DistinguishedNameToken", "UserDomainNameToken",
              "UserIPNameToken", "DomainNameToken", "KeyToken",
              "BinaryNonceToken", "TimestampToken")

# kind -> pattern, exactly as written in the schemas
PATTERNS = {
    "UserDomain": r"(\w+\.|\w+)+",
    "IPv4": r"\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}",
    "IPv6": r"([0-9a-fA-F]{1,4}:){7}[0-9a-fA-F]{1,4}",
    "Domain": r"(\w+\.\w+)+",
}


@dataclass(frozen=True)
class ValidationPattern:
    schema_id: str
    pattern: str


VALIDATION_PATTERNS = (
    ValidationPattern("UserDomainNameToken", PATTERNS["UserDomain"]),
    ValidationPattern("UserIPNameToken", PATTERNS["IPv4"]),
    ValidationPattern("UserIPNameToken", PATTERNS["IPv6"]),
    ValidationPattern("DomainNameToken", PATTERNS["Domain"]),
)


@dataclass(frozen=True)
class TokenElement:
    schema_id: str
    xml: str
    source_term: Term

    def element(self) -> ET.Element:
        return X.parse_xml(self.xml, SchemaMismatch)


# -- pattern facet semantics -------------------------------------------------

# XML Schema character class escapes, rewritten for the `regex` module
_CLASS_ESCAPES = {
    "w": r"[^\p{P}\p{Z}\p{C}]",
    "W": r"[\p{P}\p{Z}\p{C}]",
    "d": r"\p{Nd}",
    "D": r"\P{Nd}",
    "s": r"[\x20\t\n\r]",
    "S": r"[^\x20\t\n\r]",
    "i": r"[\p{L}_:]",
    "c": r"[\p{L}\p{Nd}._:\-\p{Mn}\p{Mc}]",
}
_IN_CLASS_ESCAPES = {"d": r"\p{Nd}", "D": r"\P{Nd}", "s": r"\x20\t\n\r"}


@lru_cache(maxsize=None)
def compile_xsd_pattern(pattern: str):
    """Translate an XML Schema ``pattern`` facet into an anchored regex.

    XSD patterns have no anchors (``^`` and ``$`` are ordinary characters)
    and always match the whole value.
    """
    out = []
    i = 0
    depth = 0
    while i < len(pattern):
        c = pattern[i]
        if c == "\\" and i + 1 < len(pattern):
            e = pattern[i + 1]
            table = _IN_CLASS_ESCAPES if depth else _CLASS_ESCAPES
            if e in table:
                out.append(table[e])
            elif e in _CLASS_ESCAPES:
                raise ValueError(f"\\{e} inside a character class is not supported")
            else:
                out.append("\\" + e)
            i += 2
            continue
        if c == "[":
            depth += 1
        elif c == "]" and depth:
            depth -= 1
        elif depth == 0 and c in "^$":
            out.append("\\" + c)
            i += 1
            continue
        elif depth == 0 and c == ".":
            out.append(r"[^\n\r]")
            i += 1
            continue
        out.append(c)
        i += 1
    return regex.compile("".join(out), regex.V0)


_LABEL = r"[A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?"
_HOST_RE = re.compile(rf"{_LABEL}(?:\.{_LABEL})*")
_DOMAIN_RE = re.compile(rf"{_LABEL}(?:\.{_LABEL})+")


def _strict(kind: str, value: str) -> bool:
    if kind == "IPv4":
        try:
            ipaddress.IPv4Address(value)
            return True
        except ValueError:
            return False
    if kind == "IPv6":
        try:
            ipaddress.IPv6Address(value)
            return "%" not in value
        except ValueError:
            return False
    if len(value) > 253:
        return False
    rx = _DOMAIN_RE if kind == "Domain" else _HOST_RE
    return rx.fullmatch(value) is not None


def validate_name(kind: str, value: str, strict: bool = False) -> bool:
    """Whether ``value`` is acceptable for the name kind.

    ``kind`` is one of ``UserDomain``, ``IPv4``, ``IPv6``, ``Domain``.
    """
    if kind not in PATTERNS:
        raise KeyError(f"no validation pattern for {kind!r}")
    if strict:
        return _strict(kind, value)
    return compile_xsd_pattern(PATTERNS[kind]).fullmatch(value) is not None


def _check(kind: str, value: str, strict: bool):
    if not validate_name(kind, value, strict):
        raise PatternViolation(f"{value!r} does not match the {kind} pattern")


def _check_text(*values: str):
    for v in values:
        if not X.is_xml_text(v):
            raise UnsupportedTerm(f"{v!r} holds characters XML cannot carry")


# -- encoding ------------------------------------------------------------------

def schema_for(t: Term) -> str:
    if isinstance(t, Name):
        k = t.kind
        if isinstance(k, Plain):
            return "UsernameToken"
        if isinstance(k, Distinguished):
            return "DistinguishedNameToken"
        if isinstance(k, UserDomain):
            return "UserDomainNameToken"
        if isinstance(k, (IpV4, IpV6)):
            return "UserIPNameToken"
        if isinstance(k, Domain):
            return "DomainNameToken"
    if isinstance(t, KeyTerm):
        return "KeyToken"
    if isinstance(t, NonceTerm):
        return "BinaryNonceToken" if isinstance(t.nonce, RandomNonce) else "TimestampToken"
    raise UnsupportedTerm(f"{type(t).__name__} is not a leaf token term")


def _child(parent: ET.Element, tag: str, text: str) -> ET.Element:
    node = ET.SubElement(parent, tag)
    node.text = text
    return node


def format_timestamp(t: datetime) -> str:
    t = t.astimezone(timezone.utc)
    return (f"{t.year:04d}-{t.month:02d}-{t.day:02d}T{t.hour:02d}:{t.minute:02d}:"
            f"{t.second:02d}.{t.microsecond // 1000:03d}Z")


def token_to_element(t: Term, strict: bool = False) -> ET.Element:
    schema_for(t)
    if isinstance(t, Name):
        k = t.kind
        if isinstance(k, Plain):
            _check_text(k.name)
            el = ET.Element(X.qn(X.WSSE_NS, "UsernameToken"))
            el.text = k.name
        elif isinstance(k, Distinguished):
            _check_text(k.organization, k.organizational_unit, k.common_name, k.country)
            el = ET.Element(X.ext("DistinguishedNameToken"))
            _child(el, X.ext("Organization"), k.organization)
            _child(el, X.ext("OrganizationalUnit"), k.organizational_unit)
            _child(el, X.ext("CommonName"), k.common_name)
            _child(el, X.ext("Country"), k.country)
        elif isinstance(k, UserDomain):
            _check_text(k.user)
            _check("UserDomain", k.domain, strict)
            el = ET.Element(X.ext("UserDomainNameToken"))
            _child(el, X.ext("UserName"), k.user)
            _child(el, X.ext("DomainName"), k.domain)
        elif isinstance(k, IpV4):
            _check("IPv4", k.address, strict)
            el = ET.Element(X.ext("UserIPNameToken"))
            _child(el, X.ext("IPv4"), k.address)
        elif isinstance(k, IpV6):
            _check("IPv6", k.address, strict)
            el = ET.Element(X.ext("UserIPNameToken"))
            _child(el, X.ext("IPv6"), k.address)
        else:
            _check("Domain", k.domain, strict)
            el = ET.Element(X.ext("DomainNameToken"))
            el.text = k.domain
        return el
    if isinstance(t, KeyTerm):
        km = t.key
        el = ET.Element(X.ext("KeyToken"), {"type": km.encoding_hint})
        if km.encoding_hint == "hexBinary":
            value = km.value.hex().upper()
        else:
            value = base64.b64encode(km.value).decode("ascii")
        _child(el, X.ext("KeyValue"), value)
        return el
    nonce = t.nonce
    if isinstance(nonce, RandomNonce):
        el = ET.Element(X.qn(X.WSSE_NS, "BinarySecurityToken"),
                        {"EncodingType": X.WSS_BASE64, "ValueType": X.NONCE_VALUE_TYPE})
        el.text = base64.b64encode(nonce.value).decode("ascii")
        return el
    el = ET.Element(X.qn(X.WSU_NS, "Timestamp"))
    _child(el, X.qn(X.WSU_NS, "Created"), format_timestamp(nonce.instant))
    return el


@lru_cache(maxsize=8192)
def token_fragment(t: Term) -> tuple:
    """(canonical text without namespace declarations, namespaces used)."""
    el = token_to_element(t)
    return X.fragment(el), X.namespaces_of(el)


def encode_token(t: Term, strict: bool = False) -> TokenElement:
    if strict:
        token_to_element(t, strict)
    return TokenElement(schema_for(t), token_xml(t), t)


# -- decoding ------------------------------------------------------------------

_TS_RE = re.compile(r"(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,3}))?Z",
                    re.ASCII)
_HEX_RE = re.compile(r"(?:[0-9A-Fa-f]{2})*")


def parse_timestamp(text: str) -> datetime:
    m = _TS_RE.fullmatch(text)
    if not m:
        raise BadTimestamp(f"{text!r} is not an ISO-8601 UTC timestamp")
    y, mo, d, h, mi, s, frac = m.groups()
    ms = int((frac or "0").ljust(3, "0"))
    try:
        return datetime(int(y), int(mo), int(d), int(h), int(mi), int(s), ms * 1000,
                        tzinfo=timezone.utc)
    except ValueError as exc:
        raise BadTimestamp(f"{text!r}: {exc}") from None


def _b64(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError):
        raise MalformedBinary(f"invalid base64 content {text[:40]!r}") from None


def _unhex(text: str) -> bytes:
    if not _HEX_RE.fullmatch(text):
        raise MalformedBinary(f"invalid hexBinary content {text[:40]!r}")
    return bytes.fromhex(text)


def _children(el: ET.Element, *names: str) -> list[ET.Element]:
    kids = list(el)
    if [k.tag for k in kids] != [X.ext(n) for n in names]:
        got = [X.split_qname(k.tag)[1] for k in kids]
        raise SchemaMismatch(f"{X.split_qname(el.tag)[1]} expects children {list(names)}, "
                             f"got {got}")
    if (el.text or "").strip():
        raise SchemaMismatch(f"{X.split_qname(el.tag)[1]} has stray text")
    return kids


def _leafs(el: ET.Element) -> str:
    if len(el):
        raise SchemaMismatch(f"{X.split_qname(el.tag)[1]} must not have child elements")
    return el.text or ""


_USERNAME = X.qn(X.WSSE_NS, "UsernameToken")
_BINARY = X.qn(X.WSSE_NS, "BinarySecurityToken")
_TIMESTAMP = X.qn(X.WSU_NS, "Timestamp")
_CREATED = X.qn(X.WSU_NS, "Created")
_DN, _UD, _UIP, _DOM, _KEY = (X.ext(n) for n in (
    "DistinguishedNameToken", "UserDomainNameToken", "UserIPNameToken", "DomainNameToken",
    "KeyToken"))
_IPV4, _IPV6 = X.ext("IPv4"), X.ext("IPv6")


def decode_token(xml, strict: bool = False) -> Term:
    """Inverse of :func:`encode_token`; accepts an element or its text."""
    el = xml if isinstance(xml, ET.Element) else X.parse_xml(xml, SchemaMismatch)
    tag = el.tag
    try:
        if tag == _BINARY:
            if el.get("ValueType") != X.NONCE_VALUE_TYPE:
                raise SchemaMismatch(f"unsupported binary token type {el.get('ValueType')!r}")
            if el.get("EncodingType", X.WSS_BASE64) != X.WSS_BASE64:
                raise SchemaMismatch("nonce tokens are base64 encoded")
            raw = _b64(_leafs(el))
            try:
                return NonceTerm(RandomNonce(raw))
            except TermError as exc:
                raise MalformedBinary(str(exc)) from None
        if tag == _USERNAME:
            return Name(Plain(_leafs(el)))
        if tag == _DN:
            o, ou, cn, c = _children(el, "Organization", "OrganizationalUnit",
                                     "CommonName", "Country")
            return Name(Distinguished(_leafs(o), _leafs(ou), _leafs(cn), _leafs(c)))
        if tag == _UD:
            user, domain = _children(el, "UserName", "DomainName")
            _check("UserDomain", _leafs(domain), strict)
            return Name(UserDomain(_leafs(user), _leafs(domain)))
        if tag == _UIP:
            kids = list(el)
            if len(kids) == 1 and kids[0].tag == _IPV4:
                _check("IPv4", _leafs(kids[0]), strict)
                return Name(IpV4(_leafs(kids[0])))
            if len(kids) == 1 and kids[0].tag == _IPV6:
                _check("IPv6", _leafs(kids[0]), strict)
                return Name(IpV6(_leafs(kids[0])))
            raise SchemaMismatch("UserIPNameToken holds exactly one IPv4 or IPv6 element")
        if tag == _DOM:
            _check("Domain", _leafs(el), strict)
            return Name(Domain(_leafs(el)))
        if tag == _KEY:
            hint = el.get("type", "base64Binary")
            if hint not in ("base64Binary", "hexBinary") or set(el.attrib) - {"type"}:
                raise SchemaMismatch(f"KeyToken type must be base64Binary or hexBinary, "
                                     f"got {hint!r}")
            (value,) = _children(el, "KeyValue")
            text = _leafs(value)
            raw = _unhex(text) if hint == "hexBinary" else _b64(text)
            if not raw:
                raise MalformedBinary("KeyToken carries no key octets")
            return KeyTerm(KeyMaterial(raw, hint))
        if tag == _TIMESTAMP:
            kids = list(el)
            if len(kids) != 1 or kids[0].tag != _CREATED:
                raise SchemaMismatch("wsu:Timestamp must hold a single wsu:Created")
            return NonceTerm(TimestampNonce(parse_timestamp(_leafs(kids[0]))))
    except TermError as exc:
        raise SchemaMismatch(str(exc)) from None
    raise SchemaMismatch(f"{tag} is not a known security token")


def token_xml(t: Term) -> str:
    """Canonical standalone text of a leaf's token (declarations included)."""
    frag, used = token_fragment(t)
    cut = min(i for i in (frag.find(" "), frag.find(">")) if i >= 0)
    return frag[:cut] + X.declarations(used) + frag[cut:]


def is_token_element(el: ET.Element) -> bool:
    return el.tag in TOKEN_TAGS


TOKEN_TAGS = frozenset({
    X.qn(X.WSSE_NS, "UsernameToken"), X.ext("DistinguishedNameToken"),
    X.ext("UserDomainNameToken"), X.ext("UserIPNameToken"), X.ext("DomainNameToken"),
    X.ext("KeyToken"), X.qn(X.WSSE_NS, "BinarySecurityToken"), X.qn(X.WSU_NS, "Timestamp"),
})


def validate_token(token: TokenElement, strict: bool = False) -> bool:
    """Re-check a token's XML against its own schema id."""
    try:
        term = decode_token(token.xml, strict)
    except (SchemaMismatch, PatternViolation, MalformedBinary, BadTimestamp):
        return False
    return schema_for(term) == token.schema_id
