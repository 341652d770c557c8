"""SOAP 1.2 envelopes built from terms.

Placement rule: security tokens (names, nonces, keys) go into the
``wsse:Security`` header block, user data goes into the body.  An encryption
node becomes an ``EncryptedBlock`` whose plaintext is the canonical XML of
the flattened payload::

    <env:Envelope>
      <env:Header>
        <wsse:Security env:mustUnderstand="true">
          <MessageInfo Id="..." Layout="H H B"/>
          ...tokens and header blocks, in term order...
        </wsse:Security>
      </env:Header>
      <env:Body>...UserData and body blocks...</env:Body>
    </env:Envelope>

``Layout`` records how header and body items interleave so the term can be
rebuilt in its original order.
"""

from __future__ import annotations

import base64
import binascii
import itertools
import os
import uuid
from functools import lru_cache
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import xmlutil as X
from .crypto import (
    PK_ALGORITHMS,
    SIGNATURE_ALGORITHMS,
    SK_ALGORITHMS,
    CryptoProvider,
    default_provider,
)
from .errors import (
    BadTimestamp,
    CryptoError,
    DecryptFailure,
    EnvelopeError,
    MalformedBinary,
    MalformedEnvelope,
    ManifestMismatch,
    MixedPlacement,
    PatternViolation,
    SchemaMismatch,
    UnresolvedKey,
    UnsupportedTerm,
)
from .terms import (
    Data,
    Enc,
    FuncName,
    KeyMaterial,
    KeyTerm,
    Name,
    Pair,
    Sealed,
    Slot,
    Term,
    UserData,
    seq,
)
from .tokens import (
    TokenElement,
    decode_token,
    encode_token,
    is_token_element,
    schema_for,
    token_fragment,
    token_xml,
    token_to_element,
)

HEADER, BODY = "H", "B"
SIG_LEN_PREFIX = 4
MAX_DIGEST_CANDIDATES = 200_000


class UnresolvedDigest(DecryptFailure):
    """No combination of known values reproduces a digest or keyed digest."""


@dataclass(frozen=True)
class EncryptedBlock:
    ciphertext: bytes
    func: FuncName
    algorithm_id: str
    key_ref: str
    inner_manifest: tuple
    key_ref_type: str = "key"

    def __post_init__(self):
        if not self.ciphertext:
            raise EnvelopeError("encrypted blocks carry non-empty ciphertext")
        object.__setattr__(self, "func", FuncName(self.func))
        object.__setattr__(self, "inner_manifest", tuple(self.inner_manifest))

    @property
    def is_signature(self) -> bool:
        return self.func is FuncName.PK and self.algorithm_id in SIGNATURE_ALGORITHMS

    def to_element(self) -> ET.Element:
        attrs = {"Algorithm": self.algorithm_id, "Func": self.func.value,
                 "Manifest": " ".join(self.inner_manifest)}
        if self.key_ref:
            attrs["KeyRef"] = self.key_ref
        if self.key_ref_type != "key":
            attrs["KeyRefType"] = self.key_ref_type
        el = ET.Element(X.ext("EncryptedBlock"), attrs)
        el.text = base64.b64encode(self.ciphertext).decode("ascii")
        return el

    def fragment(self) -> str:
        attrs = f' Algorithm="{X.esc_attr(self.algorithm_id)}" Func="{self.func.value}"'
        if self.key_ref:
            attrs += f' KeyRef="{X.esc_attr(self.key_ref)}"'
        if self.key_ref_type != "key":
            attrs += f' KeyRefType="{X.esc_attr(self.key_ref_type)}"'
        attrs += f' Manifest="{" ".join(self.inner_manifest)}"'
        text = base64.b64encode(self.ciphertext).decode("ascii")
        return f"<EncryptedBlock{attrs}>{text}</EncryptedBlock>"

    @classmethod
    def from_element(cls, el: ET.Element) -> "EncryptedBlock":
        try:
            raw = base64.b64decode((el.text or "").encode("ascii"), validate=True)
            func = FuncName(el.get("Func"))
            alg = el.attrib["Algorithm"]
            manifest = tuple(el.attrib["Manifest"].split())
        except (binascii.Error, ValueError, KeyError, UnicodeEncodeError) as exc:
            raise MalformedEnvelope(f"bad EncryptedBlock: {exc!r}") from None
        if len(el):
            raise MalformedEnvelope("EncryptedBlock holds only base64 text")
        try:
            return cls(raw, func, alg, el.get("KeyRef", ""), manifest,
                       el.get("KeyRefType", "key"))
        except EnvelopeError as exc:
            raise MalformedEnvelope(str(exc)) from None


HeaderItem = Union[TokenElement, EncryptedBlock]
BodyItem = Union[UserData, EncryptedBlock]


@dataclass
class Envelope:
    header_tokens: list
    body_parts: list
    message_id: str
    layout: tuple = ()

    def __post_init__(self):
        if not self.layout:
            self.layout = (HEADER,) * len(self.header_tokens) + (BODY,) * len(self.body_parts)
        self.layout = tuple(self.layout)
        if (self.layout.count(HEADER) != len(self.header_tokens)
                or self.layout.count(BODY) != len(self.body_parts)):
            raise EnvelopeError("layout does not match the header and body item counts")
        for item in self.header_tokens:
            if isinstance(item, UserData):
                raise MixedPlacement("user data in the security header")
        for item in self.body_parts:
            if isinstance(item, TokenElement):
                raise MixedPlacement("security token in the body")

    def to_element(self) -> ET.Element:
        env = ET.Element(X.qn(X.SOAP_NS, "Envelope"))
        header = ET.SubElement(env, X.qn(X.SOAP_NS, "Header"))
        sec = ET.SubElement(header, X.qn(X.WSSE_NS, "Security"),
                            {X.qn(X.SOAP_NS, "mustUnderstand"): "true"})
        ET.SubElement(sec, X.ext("MessageInfo"),
                      {"Id": self.message_id, "Layout": " ".join(self.layout)})
        for item in self.header_tokens:
            sec.append(item.to_element() if isinstance(item, EncryptedBlock)
                       else token_to_element(item.source_term))
        body = ET.SubElement(env, X.qn(X.SOAP_NS, "Body"))
        for item in self.body_parts:
            body.append(item.to_element() if isinstance(item, EncryptedBlock)
                        else user_data_element(item))
        return env

    def to_xml(self) -> str:
        ns = {X.SOAP_NS, X.WSSE_NS, X.EXT_NS}
        parts = [f'<MessageInfo Id="{X.esc_attr(self.message_id)}" '
                 f'Layout="{" ".join(self.layout)}"></MessageInfo>']
        for item in self.header_tokens:
            if isinstance(item, EncryptedBlock):
                parts.append(item.fragment())
            else:
                frag, used = token_fragment(item.source_term)
                parts.append(frag)
                ns |= used
        body = []
        for item in self.body_parts:
            body.append(item.fragment() if isinstance(item, EncryptedBlock)
                        else user_data_fragment(item))
        inner = ('<env:Header><wsse:Security env:mustUnderstand="true">' + "".join(parts)
                 + "</wsse:Security></env:Header><env:Body>" + "".join(body) + "</env:Body>")
        return X.wrap(X.qn(X.SOAP_NS, "Envelope"), "", inner, ns)

    def to_bytes(self) -> bytes:
        return self.to_xml().encode("utf-8")


def serialize(env: Envelope) -> bytes:
    return env.to_bytes()


def envelope_size(env: Envelope) -> int:
    """Octet length of the canonical serialization."""
    return len(env.to_bytes())


# -- user data -------------------------------------------------------------------

def user_data_element(d: UserData) -> ET.Element:
    if isinstance(d.content, str):
        if not X.is_xml_text(d.content):
            raise UnsupportedTerm("text user data holds characters XML cannot carry")
        enc, text = "text", d.content
    else:
        enc, text = "base64", base64.b64encode(d.content).decode("ascii")
    el = ET.Element(X.ext("UserData"), {"Encoding": enc, "MediaLabel": d.media_label})
    el.text = text
    return el


@lru_cache(maxsize=1024)
def user_data_fragment(d: UserData) -> str:
    return X.fragment(user_data_element(d))


def user_data_from_element(el: ET.Element) -> UserData:
    enc = el.get("Encoding")
    label = el.get("MediaLabel")
    if label is None or len(el):
        raise MalformedEnvelope("UserData needs a MediaLabel and text content only")
    text = el.text or ""
    if enc == "text":
        content: Union[str, bytes] = text
    elif enc == "base64":
        try:
            content = base64.b64decode(text.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError):
            raise MalformedEnvelope("UserData holds invalid base64") from None
    else:
        raise MalformedEnvelope(f"unknown UserData encoding {enc!r}")
    return UserData(content, label, empty=not content)


# -- key context -------------------------------------------------------------------

@dataclass
class KeyContext:
    """What one party knows when building or opening envelopes.

    ``keys`` maps key labels to key terms, ``inverse`` pairs public and
    private labels, ``name_keys`` maps names used as key arguments to key
    labels and ``known`` lists leaves available for digest reconstruction.
    """

    provider: CryptoProvider = field(default_factory=default_provider)
    keys: dict = field(default_factory=dict)
    inverse: dict = field(default_factory=dict)
    name_keys: dict = field(default_factory=dict)
    known: list = field(default_factory=list)
    randbytes: Callable[[int], bytes] = os.urandom

    @classmethod
    def from_table(cls, table, provider=None, randbytes=os.urandom, known=None):
        keys = {ident: KeyTerm(v.key.relabel(ident)) for ident, v in table.items()
                if isinstance(v, KeyTerm)}
        ctx = cls(provider or default_provider(), keys, dict(getattr(table, "inverse", {})),
                  {}, list(known if known is not None else table.values()), randbytes)
        return ctx

    def add_key(self, label: str, key: KeyTerm):
        self.keys[label] = KeyTerm(key.key.relabel(label))

    def label_of(self, key: KeyTerm) -> str:
        if key.key.label and key.key.label in self.keys:
            return key.key.label
        for label, k in self.keys.items():
            if k.key.value == key.key.value:
                return label
        if key.key.label:
            return key.key.label
        raise UnresolvedKey("key argument has no label in the key context")

    def resolve(self, key_arg: Term) -> tuple[str, str, KeyTerm]:
        """(key_ref, key_ref_type, key term) for an Enc key argument."""
        if isinstance(key_arg, KeyTerm):
            label = self.label_of(key_arg)
            return label, "key", key_arg
        if isinstance(key_arg, Name):
            label = self.name_keys.get(key_arg)
            if label is None or label not in self.keys:
                raise UnresolvedKey(f"no key registered for name {key_arg!r}")
            return label, "name", self.keys[label]
        raise UnresolvedKey(f"cannot resolve key argument {key_arg!r}")

    def key_material(self, label: str) -> Optional[KeyTerm]:
        return self.keys.get(label)

    def inverse_key(self, label: str) -> Optional[KeyTerm]:
        mate = self.inverse.get(label)
        return self.keys.get(mate) if mate else None


# -- building ----------------------------------------------------------------------

def items_of(t: Term) -> list:
    """Fully flatten pair structure, stopping at encryptions and leaves."""
    out = []
    stack = [t]
    while stack:
        node = stack.pop()
        if isinstance(node, Pair):
            stack.append(node.right)
            stack.append(node.left)
        else:
            out.append(node)
    return out


def placement_of(t: Term) -> str:
    if isinstance(t, Data):
        return BODY
    if isinstance(t, Enc):
        kinds = {placement_of(i) for i in items_of(t.payload)}
        if len(kinds) > 1:
            raise MixedPlacement("encrypted payload mixes user data and security tokens")
        return kinds.pop()
    if isinstance(t, Sealed):
        return t.placement
    if isinstance(t, Slot):
        raise UnsupportedTerm(f"unbound identifier {t.ident!r} in a concrete term")
    return HEADER


def manifest_id(t: Term) -> str:
    if isinstance(t, Data):
        return "UserData"
    if isinstance(t, (Enc, Sealed)):
        return "EncryptedBlock"
    return schema_for(t)


def _aad(func: FuncName, alg: str, key_ref: str, manifest) -> bytes:
    return f"{func.value}|{alg}|{key_ref}|{' '.join(manifest)}".encode()


class _Builder:
    def __init__(self, ctx: KeyContext):
        self.ctx = ctx
        self.p = ctx.provider

    def item_element(self, t: Term) -> ET.Element:
        if isinstance(t, Data):
            return user_data_element(t.data)
        if isinstance(t, Enc):
            return self.block(t).to_element()
        if isinstance(t, Sealed):
            return t.block.to_element()
        return token_to_element(t)

    def item_fragment(self, t: Term, ns: set) -> str:
        if isinstance(t, Data):
            return user_data_fragment(t.data)
        if isinstance(t, Enc):
            return self.block(t).fragment()
        if isinstance(t, Sealed):
            return t.block.fragment()
        frag, used = token_fragment(t)
        ns |= used
        return frag

    def plaintext(self, items) -> bytes:
        ns = {X.EXT_NS}
        inner = "".join([self.item_fragment(i, ns) for i in items])
        return X.wrap(X.ext("Plaintext"), "", inner, ns).encode("utf-8")

    def block(self, t: Enc) -> EncryptedBlock:
        placement_of(t)
        items = items_of(t.payload)
        manifest = tuple(manifest_id(i) for i in items)
        func = t.func
        if func in (FuncName.H, FuncName.HMAC) and any(
                isinstance(i, (Enc, Sealed)) for i in items):
            raise EnvelopeError("h and hmac payloads must be flat sequences of leaves")
        pt = self.plaintext(items)
        if func is FuncName.H:
            return EncryptedBlock(self.p.hash(pt), func, self.p.suite.hash_algorithm, "",
                                  manifest)
        ref, ref_type, key = self.ctx.resolve(t.key_arg)
        raw = key.key.value
        if func is FuncName.SK:
            alg = self.p.suite.sk_algorithm
            ct = self.p.sk_encrypt(raw, pt, _aad(func, alg, ref, manifest),
                                   nonce=self.ctx.randbytes(12))
            return EncryptedBlock(ct, func, alg, ref, manifest, ref_type)
        if func is FuncName.HMAC:
            return EncryptedBlock(self.p.hmac(raw, pt), func, self.p.suite.hmac_algorithm, ref,
                                  manifest, ref_type)
        try:
            private = self.p.is_private_key(raw)
        except CryptoError:
            private = False
        if private:
            sig = self.p.sign(raw, pt)
            ct = len(pt).to_bytes(SIG_LEN_PREFIX, "big") + pt + sig
            return EncryptedBlock(ct, func, self.p.suite.signature_algorithm, ref, manifest,
                                  ref_type)
        try:
            ct = self.p.pk_encrypt(raw, pt)
        except CryptoError as exc:
            raise UnresolvedKey(f"key {ref!r} is not usable for pk: {exc}") from None
        return EncryptedBlock(ct, func, self.p.suite.pk_algorithm, ref, manifest, ref_type)


def build_envelope(t: Term, ctx: KeyContext, message_id: Optional[str] = None) -> Envelope:
    b = _Builder(ctx)
    header, body, layout = [], [], []
    for item in items_of(t):
        where = placement_of(item)
        if isinstance(item, Enc):
            part = b.block(item)
        elif isinstance(item, Sealed):
            part = item.block
        elif isinstance(item, Data):
            part = item.data
        else:
            part = encode_token(item)
        (header if where == HEADER else body).append(part)
        layout.append(where)
    if message_id is None:
        message_id = str(uuid.UUID(bytes=ctx.randbytes(16), version=4))
    return Envelope(header, body, message_id, tuple(layout))


# -- parsing -----------------------------------------------------------------------

def parse_envelope_xml(xml) -> Envelope:
    """Structural parse: tokens are decoded, blocks stay sealed."""
    root = X.parse_xml(xml, MalformedEnvelope)
    if root.tag != X.qn(X.SOAP_NS, "Envelope"):
        raise MalformedEnvelope("root element is not a SOAP 1.2 Envelope")
    kids = list(root)
    if len(kids) != 2 or kids[0].tag != X.qn(X.SOAP_NS, "Header") \
            or kids[1].tag != X.qn(X.SOAP_NS, "Body"):
        raise MalformedEnvelope("envelope must hold a Header followed by a Body")
    header_el, body_el = kids
    secs = [k for k in header_el if k.tag == X.qn(X.WSSE_NS, "Security")]
    if len(secs) != 1:
        raise MalformedEnvelope("expected exactly one wsse:Security header block")
    sec = list(secs[0])
    if not sec or sec[0].tag != X.ext("MessageInfo"):
        raise MalformedEnvelope("Security block must start with MessageInfo")
    info = sec[0]
    message_id = info.get("Id", "")
    layout = tuple((info.get("Layout") or "").split())
    header = []
    try:
        for el in sec[1:]:
            if el.tag == X.ext("EncryptedBlock"):
                header.append(EncryptedBlock.from_element(el))
            elif is_token_element(el):
                term = decode_token(el)
                header.append(TokenElement(schema_for(term), token_xml(term), term))
            else:
                raise MalformedEnvelope(f"unexpected header element {el.tag}")
    except (SchemaMismatch, PatternViolation, MalformedBinary, BadTimestamp) as exc:
        raise MalformedEnvelope(f"bad security token: {exc}") from None
    body = []
    for el in body_el:
        if el.tag == X.ext("EncryptedBlock"):
            body.append(EncryptedBlock.from_element(el))
        elif el.tag == X.ext("UserData"):
            body.append(user_data_from_element(el))
        else:
            raise MalformedEnvelope(f"unexpected body element {el.tag}")
    if set(layout) - {HEADER, BODY}:
        raise MalformedEnvelope("bad layout descriptor")
    try:
        return Envelope(header, body, message_id, layout)
    except EnvelopeError as exc:
        raise MalformedEnvelope(str(exc)) from None


class _Pending(Exception):
    """The block cannot be opened with what is known so far."""


class _Opener:
    def __init__(self, ctx: KeyContext, allow_opaque: bool):
        self.ctx = ctx
        self.p = ctx.provider
        self.allow_opaque = allow_opaque
        self.learned: dict[str, KeyTerm] = {}
        self.seen: list[Term] = []
        self.opened: dict[int, list] = {}
        self.key_args: dict[int, Term] = {}
        self.blocks: list[EncryptedBlock] = []
        self.failures: dict[int, Exception] = {}

    # keys

    def _key(self, label: str) -> Optional[KeyTerm]:
        return self.ctx.keys.get(label) or self.learned.get(label)

    def _candidates_sk(self):
        pool = {}
        # keys held under a label were already tried by label; only keys that
        # arrived inside this envelope can sit behind an unfamiliar label
        for t in itertools.chain(self.learned.values(), self.seen):
            if isinstance(t, KeyTerm):
                pool.setdefault(t.key.value, t)
        return pool.values()

    def _key_arg(self, block: EncryptedBlock, key: KeyTerm) -> Term:
        if block.key_ref_type == "name":
            for name, label in self.ctx.name_keys.items():
                if label == block.key_ref:
                    return name
            raise UnresolvedKey(f"no name maps to key {block.key_ref!r}")
        return KeyTerm(key.key.relabel(block.key_ref))

    # plaintext

    def _items_from_plaintext(self, pt: bytes, block: EncryptedBlock) -> list:
        try:
            root = X.parse_xml(pt, ManifestMismatch)
        except ManifestMismatch:
            raise
        if root.tag != X.ext("Plaintext"):
            raise ManifestMismatch("plaintext wrapper missing")
        kids = list(root)
        if len(kids) != len(block.inner_manifest):
            raise ManifestMismatch(f"manifest lists {len(block.inner_manifest)} items, "
                                   f"plaintext holds {len(kids)}")
        out = []
        for el, mid in zip(kids, block.inner_manifest):
            try:
                if el.tag == X.ext("EncryptedBlock"):
                    item = EncryptedBlock.from_element(el)
                    got = "EncryptedBlock"
                elif el.tag == X.ext("UserData"):
                    item = Data(user_data_from_element(el))
                    got = "UserData"
                else:
                    item = decode_token(el)
                    got = schema_for(item)
            except (SchemaMismatch, PatternViolation, MalformedBinary, BadTimestamp,
                    MalformedEnvelope) as exc:
                raise ManifestMismatch(f"plaintext item does not decode: {exc}") from None
            if got != mid:
                raise ManifestMismatch(f"manifest says {mid}, plaintext holds {got}")
            out.append(item)
        return out

    def _digest_search(self, block: EncryptedBlock, fn) -> list:
        pools = []
        universe = list(dict.fromkeys(itertools.chain(self.seen, self.ctx.known)))
        for mid in block.inner_manifest:
            cands = []
            for t in universe:
                try:
                    if manifest_id(t) == mid and not isinstance(t, (Enc, Sealed, Slot)):
                        cands.append(t)
                except UnsupportedTerm:
                    continue
            if not cands:
                raise _Pending()
            pools.append(cands)
        total = 1
        for pool in pools:
            total *= len(pool)
        if total > MAX_DIGEST_CANDIDATES:
            raise _Pending()
        b = _Builder(self.ctx)
        for combo in itertools.product(*pools):
            pt = b.plaintext(combo)
            if fn(pt):
                return list(combo)
        raise _Pending()

    def open_block(self, block: EncryptedBlock) -> tuple[list, Term]:
        func = block.func
        if func is FuncName.H:
            if block.algorithm_id != self.p.suite.hash_algorithm:
                raise DecryptFailure(f"digest algorithm {block.algorithm_id} not in this suite")
            items = self._digest_search(block, lambda pt: self.p.hash(pt) == block.ciphertext)
            return items, None
        if func is FuncName.SK:
            if block.algorithm_id not in SK_ALGORITHMS:
                raise DecryptFailure(f"unknown sk algorithm {block.algorithm_id}")
            aad = _aad(func, block.algorithm_id, block.key_ref, block.inner_manifest)
            key = self._key(block.key_ref)
            if key is not None:
                try:
                    pt = self.p.sk_decrypt(key.key.value, block.ciphertext, aad,
                                           algorithm=block.algorithm_id)
                except CryptoError as exc:
                    raise DecryptFailure(f"block under {block.key_ref}: {exc}") from None
            else:
                pt = None
                length = SK_ALGORITHMS[block.algorithm_id][1]
                for cand in self._candidates_sk():
                    if len(cand.key.value) != length:
                        continue
                    try:
                        pt = self.p.sk_decrypt(cand.key.value, block.ciphertext, aad,
                                               algorithm=block.algorithm_id)
                    except CryptoError:
                        continue
                    key = cand
                    self.learned[block.key_ref] = KeyTerm(cand.key.relabel(block.key_ref))
                    break
                if pt is None:
                    raise _Pending()
            return self._items_from_plaintext(pt, block), self._key_arg(block, key)
        if func is FuncName.HMAC:
            if block.algorithm_id != self.p.suite.hmac_algorithm:
                raise DecryptFailure(f"hmac algorithm {block.algorithm_id} not in this suite")
            key = self._key(block.key_ref)
            if key is None:
                raise _Pending()
            items = self._digest_search(
                block, lambda pt: self.p.hmac_verify(key.key.value, pt, block.ciphertext))
            return items, self._key_arg(block, key)
        # pk
        if block.is_signature:
            public = self.ctx.inverse_key(block.key_ref)
            if public is None:
                raise _Pending()
            ct = block.ciphertext
            n = int.from_bytes(ct[:SIG_LEN_PREFIX], "big")
            pt, sig = ct[SIG_LEN_PREFIX:SIG_LEN_PREFIX + n], ct[SIG_LEN_PREFIX + n:]
            if len(ct) < SIG_LEN_PREFIX + n or not self.p.verify(public.key.value, pt, sig):
                raise DecryptFailure(f"signature under {block.key_ref} does not verify")
            own = self.ctx.keys.get(block.key_ref)
            key_arg = own if own is not None else KeyTerm(public.key.relabel(block.key_ref))
            if block.key_ref_type == "name":
                key_arg = self._key_arg(block, key_arg)
            else:
                key_arg = KeyTerm(key_arg.key.relabel(block.key_ref))
            return self._items_from_plaintext(pt, block), key_arg
        if block.algorithm_id not in PK_ALGORITHMS:
            raise DecryptFailure(f"unknown pk algorithm {block.algorithm_id}")
        private = self.ctx.inverse_key(block.key_ref)
        if private is None:
            raise _Pending()
        try:
            pt = self.p.pk_decrypt(private.key.value, block.ciphertext)
        except CryptoError as exc:
            raise DecryptFailure(f"block under {block.key_ref}: {exc}") from None
        public = self.ctx.keys.get(block.key_ref)
        if public is None:
            public = KeyTerm(KeyMaterial(self.p.public_from_private(private.key.value),
                                         "base64Binary", block.key_ref))
        return self._items_from_plaintext(pt, block), self._key_arg(block, public)

    def note_items(self, items):
        for item in items:
            if isinstance(item, EncryptedBlock):
                self.blocks.append(item)
            else:
                self.seen.append(item)

    def run(self, top_items: list, layout) -> list:
        self.layout = layout
        self.note_items(top_items)
        progress = True
        while progress:
            progress = False
            for block in list(self.blocks):
                if id(block) in self.opened:
                    continue
                try:
                    items, key_arg = self.open_block(block)
                except _Pending:
                    continue
                self.opened[id(block)] = items
                self.key_args[id(block)] = key_arg
                self.note_items(items)
                progress = True
        return [self.assemble(i, w) for i, w in zip(top_items, self.layout)]

    def assemble(self, item, where: str) -> Term:
        if not isinstance(item, EncryptedBlock):
            return item
        items = self.opened.get(id(item))
        if items is None:
            if self.allow_opaque:
                return Sealed(item, where)
            if item.func in (FuncName.H, FuncName.HMAC) and (
                    item.func is FuncName.H or self._key(item.key_ref) is not None):
                raise UnresolvedDigest(f"cannot reproduce the {item.func.value} digest "
                                       f"over {' '.join(item.inner_manifest)}")
            raise UnresolvedKey(f"no key available for block under {item.key_ref!r}")
        return Enc(seq(*(self.assemble(i, where) for i in items)), item.func,
                   self.key_args[id(item)])


def open_envelope(env: Envelope, ctx: KeyContext, allow_opaque: bool = False) -> Term:
    """Rebuild the term carried by ``env``, opening every block ``ctx`` allows.

    With ``allow_opaque`` blocks that cannot be opened come back as
    :class:`Sealed` leaves instead of raising.
    """
    header = iter(env.header_tokens)
    body = iter(env.body_parts)
    top = []
    for where in env.layout:
        part = next(header) if where == HEADER else next(body)
        if isinstance(part, TokenElement):
            top.append(part.source_term)
        elif isinstance(part, UserData):
            top.append(Data(part))
        else:
            top.append(part)
    if not top:
        raise MalformedEnvelope("envelope carries no items")
    return seq(*_Opener(ctx, allow_opaque).run(top, env.layout))


def parse_envelope(xml, ctx: KeyContext, allow_opaque: bool = False) -> Term:
    return open_envelope(parse_envelope_xml(xml), ctx, allow_opaque)
