"""Namespaces, canonical serialization and guarded parsing.

The serializer is deliberately small: elements built with ElementTree in
Clark notation are written with fixed prefixes, sorted attributes, no
insignificant whitespace and namespace declarations only on the outermost
element.  Identical trees always give identical octets.
"""

from __future__ import annotations

import os
import re
import xml.etree.ElementTree as ET
from functools import lru_cache

from .errors import MalformedEnvelope

DEFAULT_EXT_NS = "urn:soapsec:wss-extensions:1.0"
EXT_NS = os.environ.get("SOAPSEC_EXT_NS", DEFAULT_EXT_NS)

SOAP_NS = "http://www.w3.org/2003/05/soap-envelope"
WSSE_NS = ("http://docs.oasis-open.org/wss/2004/01/"
           "oasis-200401-wss-wssecurity-secext-1.0.xsd")
WSU_NS = ("http://docs.oasis-open.org/wss/2004/01/"
          "oasis-200401-wss-wssecurity-utility-1.0.xsd")
WSS_BASE64 = ("http://docs.oasis-open.org/wss/2004/01/"
              "oasis-200401-wss-soap-message-security-1.0#Base64Binary")
NONCE_VALUE_TYPE = EXT_NS + "#Nonce"

XML_NS = "http://www.w3.org/XML/1998/namespace"

PREFIXES = {SOAP_NS: "env", WSSE_NS: "wsse", WSU_NS: "wsu", EXT_NS: "", XML_NS: "xml"}

# XML 1.0 Char production, minus the surrogate block
_XML_ILLEGAL = re.compile("[^\t\n\r\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]")


def qn(ns: str, local: str) -> str:
    return f"{{{ns}}}{local}"


def ext(local: str) -> str:
    return qn(EXT_NS, local)


def split_qname(tag: str) -> tuple[str, str]:
    if tag.startswith("{"):
        ns, local = tag[1:].split("}", 1)
        return ns, local
    return "", tag


def is_xml_text(s: str) -> bool:
    return _XML_ILLEGAL.search(s) is None


_TEXT_SPECIAL = re.compile("[&<>\r]")
_ATTR_SPECIAL = re.compile('[&<"\t\n\r]')


def _esc_text(s: str) -> str:
    if not _TEXT_SPECIAL.search(s):
        return s
    return (s.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace("\r", "&#13;"))


def _esc_attr(s: str) -> str:
    if not _ATTR_SPECIAL.search(s):
        return s
    return (s.replace("&", "&amp;").replace("<", "&lt;").replace('"', "&quot;")
            .replace("\t", "&#9;").replace("\n", "&#10;").replace("\r", "&#13;"))


esc_text = _esc_text
esc_attr = _esc_attr


@lru_cache(maxsize=None)
def _prefixed(tag: str) -> str:
    ns, local = split_qname(tag)
    if not ns:
        return local
    try:
        prefix = PREFIXES[ns]
    except KeyError:
        raise ValueError(f"no prefix registered for namespace {ns}") from None
    return f"{prefix}:{local}" if prefix else local


def namespaces_of(elem: ET.Element) -> frozenset:
    used = set()
    for node in elem.iter():
        ns, _ = split_qname(node.tag)
        if ns:
            used.add(ns)
        for key in node.attrib:
            ans, _ = split_qname(key)
            if ans:
                used.add(ans)
    return frozenset(used)


def declarations(namespaces) -> str:
    """Namespace declaration attributes, in canonical order."""
    return _declarations(frozenset(namespaces))


@lru_cache(maxsize=256)
def _declarations(namespaces: frozenset) -> str:
    # the xml prefix is bound by definition and never declared
    out = []
    for prefix, ns in sorted((PREFIXES[ns], ns) for ns in namespaces if ns != XML_NS):
        attr = f"xmlns:{prefix}" if prefix else "xmlns"
        out.append(f' {attr}="{_esc_attr(ns)}"')
    return "".join(out)


def canonical(elem: ET.Element) -> str:
    """Canonical text of ``elem`` with every namespace declared at its root."""
    out: list[str] = []
    _write(elem, out, declarations(namespaces_of(elem)))
    return "".join(out)


def fragment(elem: ET.Element) -> str:
    """Canonical text without namespace declarations, for embedding."""
    out: list[str] = []
    _write(elem, out, "")
    return "".join(out)


def canonical_bytes(elem: ET.Element) -> bytes:
    return canonical(elem).encode("utf-8")


def wrap(tag: str, attrs: str, inner: str, namespaces) -> str:
    """Root element around pre-serialized fragments; ``attrs`` is pre-sorted text."""
    name = _prefixed(tag)
    ns = set(namespaces)
    ns.add(split_qname(tag)[0])
    ns.discard("")
    return f"<{name}{declarations(ns)}{attrs}>{inner}</{name}>"


def _write(elem: ET.Element, out: list, decls: str):
    name = _prefixed(elem.tag)
    out.append("<" + name)
    if decls:
        out.append(decls)
    if elem.attrib:
        for key, value in sorted((_prefixed(k), v) for k, v in elem.attrib.items()):
            out.append(f' {key}="{_esc_attr(value)}"')
    out.append(">")
    if elem.text:
        out.append(_esc_text(elem.text))
    for child in elem:
        _write(child, out, "")
        if child.tail:
            out.append(_esc_text(child.tail))
    out.append(f"</{name}>")


def parse_xml(data, error=MalformedEnvelope) -> ET.Element:
    """Parse a document, refusing DTDs (and with them entity expansion)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if b"<!DOCTYPE" in data or b"<!ENTITY" in data:
        raise error("document type declarations are not accepted")
    try:
        return ET.fromstring(data)
    except ET.ParseError as exc:
        raise error(f"not well-formed XML: {exc}") from None


def element_children(elem: ET.Element) -> list[ET.Element]:
    return list(elem)


def text_of(elem: ET.Element) -> str:
    return elem.text or ""
