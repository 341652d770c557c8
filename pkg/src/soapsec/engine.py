"""Protocol scripts and the role interpreter that runs them.

A protocol fixture is a small text file::

    protocol lowe-ban
    display Lowe-BAN
    roles A:Initiator B:Respondent
    symbols
      A = name alice
      Kab = key
      Na = nonce
    end
    knows A: A B Kab
    1. A -> B : A,Na
       fresh Na
    2. B -> A : {Na,K'ab,B}sk(Kab)
       fresh K'ab
       check nonce-echo Na
    agree K'ab Na

Step directives are ``fresh <ids>``, ``check <kind> <ids>`` (kinds:
``nonce-echo``, ``fresh-timestamp``, ``signature``, ``decrypt``) and
``phase <n>``.  Top-level ``derive K = dh(Ga, Gb)`` lines compute a shared
key as soon as a role holds one private half and the other public value.
"""

from __future__ import annotations

import json
import random
import re
import statistics
import threading
import time
from functools import cached_property, lru_cache
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from typing import Callable, Optional

from . import xmlutil as X
from .crypto import CryptoProvider, default_provider
from .envelope import (
    Envelope,
    KeyContext,
    build_envelope,
    envelope_size,
    items_of,
    open_envelope,
    parse_envelope_xml,
    user_data_element,
    user_data_from_element,
)
from .errors import (
    AgreementFailure,
    CheckFailed,
    DecryptFailure,
    ExecutabilityError,
    MissingKnowledge,
    NotYourTurn,
    ProtocolError,
    ProtocolViolation,
    SoapSecError,
    TermError,
)
from .terms import (
    Data,
    Enc,
    FuncName,
    KeyMaterial,
    KeyTerm,
    NonceTerm,
    Pair,
    RandomNonce,
    Sealed,
    Slot,
    SymbolDecl,
    SymbolTable,
    Term,
    TimestampNonce,
    UserData,
    parse_symbol_lines,
    parse_template,
    print_term,
    walk,
)
from .tokens import decode_token, token_to_element

CHECK_KINDS = ("nonce-echo", "fresh-timestamp", "signature", "decrypt")
FRESH_KINDS = ("nonce", "timestamp", "key", "dhkey", "data")
DEFAULT_WINDOW_S = 300.0
CENT = Decimal("0.01")


# -- protocol specs ----------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    kind: str
    ident: str


@dataclass(frozen=True)
class Step:
    number: int
    sender: str
    receiver: str
    template: Term
    text: str
    fresh: tuple = ()
    checks: tuple = ()
    phase: int = 1


@dataclass(frozen=True)
class Derivation:
    target: str
    func: str
    args: tuple


@dataclass(frozen=True)
class StepPlan:
    """What the receiver of a step is expected to open (by subterm text)."""

    opens: frozenset
    opaque: frozenset


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    display: str
    roles: tuple
    sides: dict
    steps: tuple
    initial_knowledge: dict
    symbols: tuple
    derivations: tuple = ()
    agree: tuple = ()
    plans: tuple = ()

    @property
    def fresh_directives(self) -> dict:
        return {s.number: s.fresh for s in self.steps if s.fresh}

    @cached_property
    def kinds(self) -> dict:
        return {d.ident: d.kind for d in self.symbols}

    @cached_property
    def inverse(self) -> dict:
        out = {}
        for d in self.symbols:
            if d.kind == "privkey":
                out[d.ident] = d.literal
                out[d.literal] = d.ident
        return out

    @property
    def asymmetric(self) -> bool:
        """Whether any message uses pk or a key agreement."""
        if self.derivations:
            return True
        return any(isinstance(t, Enc) and t.func is FuncName.PK
                   for s in self.steps for t in walk(s.template))

    @property
    def phases(self) -> tuple:
        return tuple(sorted({s.phase for s in self.steps}))

    @property
    def sub_exchanges(self) -> int:
        return len(self.phases)

    def long_term(self) -> tuple:
        fresh = {i for s in self.steps for i in s.fresh}
        derived = {d.target for d in self.derivations}
        return tuple(d for d in self.symbols if d.ident not in fresh | derived)

    def row_label(self, phase: int, side: str) -> str:
        if len(self.phases) > 1:
            return f"{self.display} {phase} {side}"
        return f"{self.display} {side}"

    def row_keys(self) -> list:
        keys = []
        for s in self.steps:
            for role in (s.sender, s.receiver):
                k = (s.phase, self.sides[role])
                if k not in keys:
                    keys.append(k)
        order = {"Initiator": 0, "Respondent": 1}
        return sorted(keys, key=lambda k: (k[0], order.get(k[1], 2), k[1]))


_STEP_RE = re.compile(r"(\d+)\.\s*(\S+)\s*->\s*(\S+)\s*:\s*(.+)")
_DERIVE_RE = re.compile(r"(\S+)\s*=\s*(\w+)\(\s*([^,\s]+)\s*,\s*([^)\s]+)\s*\)")


def parse_protocol(text: str) -> ProtocolSpec:
    name = display = None
    roles, sides = [], {}
    knows: dict = {}
    steps_raw: list = []
    derivations, agree = [], []
    symbol_lines: list = []
    in_symbols = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        body = line.strip()
        if in_symbols:
            if body == "end":
                in_symbols = False
            else:
                symbol_lines.append(body)
            continue
        indented = line[0].isspace()
        try:
            if indented and steps_raw:
                word, _, rest = body.partition(" ")
                cur = steps_raw[-1]
                if word == "fresh":
                    cur["fresh"].extend(rest.split())
                elif word == "check":
                    kind, *idents = rest.split()
                    if kind not in CHECK_KINDS or not idents:
                        raise ValueError(f"bad check {rest!r}")
                    cur["checks"].extend(Check(kind, i) for i in idents)
                elif word == "phase":
                    cur["phase"] = int(rest)
                else:
                    raise ValueError(f"unknown step directive {word!r}")
                continue
            m = _STEP_RE.fullmatch(body)
            if m:
                steps_raw.append({"number": int(m.group(1)), "sender": m.group(2),
                                  "receiver": m.group(3), "text": m.group(4).strip(),
                                  "fresh": [], "checks": [],
                                  "phase": steps_raw[-1]["phase"] if steps_raw else 1})
                continue
            word, _, rest = body.partition(" ")
            if word == "protocol":
                name = rest.strip()
            elif word == "display":
                display = rest.strip()
            elif word == "roles":
                for item in rest.split():
                    role, _, side = item.partition(":")
                    roles.append(role)
                    sides[role] = side or role
            elif word == "symbols":
                in_symbols = True
            elif word == "knows":
                role, _, idents = rest.partition(":")
                knows.setdefault(role.strip(), set()).update(idents.split())
            elif word == "derive":
                dm = _DERIVE_RE.fullmatch(rest.strip())
                if not dm:
                    raise ValueError(f"bad derive line {rest!r}")
                derivations.append(Derivation(dm.group(1), dm.group(2),
                                              (dm.group(3), dm.group(4))))
            elif word == "agree":
                agree.extend(rest.split())
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (ValueError, TermError) as exc:
            raise ExecutabilityError(f"line {lineno}: {exc}") from None
    if not name or not roles or not steps_raw:
        raise ExecutabilityError("a protocol needs a name, roles and at least one step")
    try:
        symbols = tuple(parse_symbol_lines("\n".join(symbol_lines)))
    except TermError as exc:
        raise ExecutabilityError(f"symbols: {exc}") from None
    steps = []
    for i, s in enumerate(steps_raw, 1):
        if s["number"] != i:
            raise ExecutabilityError(f"step {s['number']} is out of sequence (expected {i})")
        try:
            tpl = parse_template(s["text"])
        except TermError as exc:
            raise ExecutabilityError(f"step {i}: {exc}") from None
        steps.append(Step(i, s["sender"], s["receiver"], tpl, s["text"], tuple(s["fresh"]),
                          tuple(s["checks"]), s["phase"]))
    spec = ProtocolSpec(name, display or name, tuple(roles), dict(sides), tuple(steps),
                        {r: frozenset(knows.get(r, ())) for r in roles}, symbols,
                        tuple(derivations), tuple(agree))
    plans = check_executability(spec)
    return ProtocolSpec(spec.name, spec.display, spec.roles, spec.sides, spec.steps,
                        spec.initial_knowledge, spec.symbols, spec.derivations, spec.agree,
                        plans)


# -- executability -------------------------------------------------------------------

def _slots(t: Term) -> set:
    out = set()
    stack = [t]
    while stack:
        n = stack.pop()
        if isinstance(n, Slot):
            out.add(n.ident)
        elif isinstance(n, Pair):
            stack += [n.left, n.right]
        elif isinstance(n, Enc):
            stack.append(n.payload)
            if n.key_arg is not None:
                stack.append(n.key_arg)
    return out


def _can_build(t: Term, know: set, opaque: set, inverse: dict) -> Optional[str]:
    """None if buildable, else the first missing identifier or subterm."""
    if isinstance(t, Slot):
        return None if t.ident in know else t.ident
    if isinstance(t, Pair):
        return _can_build(t.left, know, opaque, inverse) or \
            _can_build(t.right, know, opaque, inverse)
    if isinstance(t, Enc):
        if print_term(t) in opaque:
            return None
        if t.key_arg is not None and t.key_arg.ident not in know:
            return print_term(t)
        return _can_build(t.payload, know, opaque, inverse)
    return None


def _can_open(t: Enc, know: set, inverse: dict) -> bool:
    if t.func is FuncName.H:
        return _slots(t.payload) <= know
    ident = t.key_arg.ident
    if t.func is FuncName.PK:
        return inverse.get(ident) in know
    if t.func is FuncName.HMAC:
        return ident in know and _slots(t.payload) <= know
    return ident in know


def _receive(t: Term, know: set, inverse: dict, opens: set, opaque: set):
    """Knowledge a receiver gains from ``t``; iterates because keys learned in
    one block can open another block of the same message."""
    changed = True
    while changed:
        changed = False
        stack = [t]
        while stack:
            n = stack.pop()
            if isinstance(n, Slot):
                if n.ident not in know:
                    know.add(n.ident)
                    changed = True
            elif isinstance(n, Pair):
                stack += [n.left, n.right]
            elif isinstance(n, Enc):
                text = print_term(n)
                if text in opens:
                    stack.append(n.payload)
                elif _can_open(n, know, inverse):
                    opens.add(text)
                    opaque.discard(text)
                    stack.append(n.payload)
                    changed = True
                else:
                    opaque.add(text)


def check_executability(spec: ProtocolSpec) -> tuple:
    declared = {d.ident for d in spec.symbols} | {d.target for d in spec.derivations}
    kinds = spec.kinds
    inverse = spec.inverse
    for d in spec.derivations:
        if d.func != "dh" or any(kinds.get(a) != "dhkey" for a in d.args):
            raise ExecutabilityError(f"derive {d.target}: only dh over two dhkey values")
    for role, idents in spec.initial_knowledge.items():
        if idents - declared:
            raise ExecutabilityError(f"{role} knows undeclared {sorted(idents - declared)}")
    know = {r: set(spec.initial_knowledge[r]) for r in spec.roles}
    secrets = {r: set() for r in spec.roles}
    opaque = {r: set() for r in spec.roles}
    plans = []

    def derive(role):
        for d in spec.derivations:
            a, b = d.args
            if d.target not in know[role] and {a, b} <= know[role] and (
                    a in secrets[role] or b in secrets[role]):
                know[role].add(d.target)

    for step in spec.steps:
        for role in (step.sender, step.receiver):
            if role not in spec.roles:
                raise ExecutabilityError(f"step {step.number}: undeclared role {role!r}")
        if step.sender == step.receiver:
            raise ExecutabilityError(f"step {step.number}: sender and receiver coincide")
        used = _slots(step.template)
        if used - declared:
            raise ExecutabilityError(f"step {step.number}: undeclared {sorted(used - declared)}")
        s_know = know[step.sender]
        for ident in step.fresh:
            if kinds.get(ident) not in FRESH_KINDS:
                raise ExecutabilityError(f"step {step.number}: {ident} cannot be generated")
            if ident in s_know:
                raise ExecutabilityError(f"step {step.number}: {ident} is already known "
                                         f"to {step.sender}")
            s_know.add(ident)
            if kinds[ident] == "dhkey":
                secrets[step.sender].add(ident)
        derive(step.sender)
        missing = _can_build(step.template, s_know, opaque[step.sender], inverse)
        if missing:
            raise ExecutabilityError(f"step {step.number}: {step.sender} cannot construct "
                                     f"{missing!r} from its knowledge")
        r_know = know[step.receiver]
        before = set(r_know)
        for chk in step.checks:
            if chk.kind == "nonce-echo" and chk.ident not in before:
                raise ExecutabilityError(f"step {step.number}: nonce-echo on {chk.ident}, "
                                         f"which {step.receiver} has not seen")
            if chk.ident not in used:
                raise ExecutabilityError(f"step {step.number}: check on {chk.ident}, "
                                         f"which the message does not carry")
        opens: set = set()
        _receive(step.template, r_know, inverse, opens, opaque[step.receiver])
        derive(step.receiver)
        plans.append(StepPlan(frozenset(opens), frozenset(opaque[step.receiver])))
    for ident in spec.agree:
        holders = [r for r in spec.roles if ident in know[r]]
        if len(holders) < 2:
            raise ExecutabilityError(f"agreement on {ident} needs two roles that hold it")
    return tuple(plans)


# -- builtin protocols -----------------------------------------------------------------

BUILTIN_FILES = ("lowe_ban.protocol", "iso9798.protocol", "kerberos.protocol",
                 "ccitt_x509.protocol", "andrew_rpc.protocol")
_REGISTRY: dict = {}
_REG_LOCK = threading.Lock()


def register_protocol(spec: ProtocolSpec):
    with _REG_LOCK:
        _REGISTRY[spec.name] = spec
    return spec


def register_builtin_protocols() -> list:
    specs = []
    pkg = resources.files("soapsec") / "protocols"
    for fname in BUILTIN_FILES:
        specs.append(register_protocol(parse_protocol((pkg / fname).read_text("utf-8"))))
    return specs


def get_protocol(name: str) -> ProtocolSpec:
    if not _REGISTRY:
        register_builtin_protocols()
    key = name.lower()
    for spec in _REGISTRY.values():
        if key in (spec.name.lower(), spec.display.lower()):
            return spec
    raise KeyError(name)


def list_protocols() -> list:
    if not _REGISTRY:
        register_builtin_protocols()
    return list(_REGISTRY.values())


# -- long-term values --------------------------------------------------------------------

class Keystore:
    """Long-term values (names, shared keys, key pairs) for each protocol.

    Generated lazily and shared by every party of a run, standing in for the
    out-of-band distribution the protocols assume.
    """

    def __init__(self, provider: Optional[CryptoProvider] = None, randbytes=None):
        self.provider = provider or default_provider()
        self.randbytes = randbytes or self.provider.randbytes
        self._tables: dict = {}
        self._lock = threading.Lock()

    def table_for(self, spec: ProtocolSpec) -> dict:
        with self._lock:
            table = self._tables.get(spec.name)
            if table is None:
                st = SymbolTable.from_decls(spec.long_term(), self.provider, self.randbytes,
                                            self.provider.sk_key_length)
                table = {i: st[i] for i in st}
                self._tables[spec.name] = table
            return table

    def to_json(self) -> str:
        out = {}
        for proto, table in self._tables.items():
            entries = {}
            for ident, value in table.items():
                if isinstance(value, Data):
                    el = user_data_element(value.data)
                else:
                    el = token_to_element(value)
                entries[ident] = X.canonical(el)
            out[proto] = entries
        return json.dumps(out, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, provider=None) -> "Keystore":
        ks = cls(provider)
        for proto, entries in json.loads(text).items():
            table = {}
            for ident, xml in entries.items():
                el = X.parse_xml(xml)
                if el.tag == X.ext("UserData"):
                    table[ident] = Data(user_data_from_element(el))
                else:
                    value = decode_token(el)
                    if isinstance(value, KeyTerm):
                        value = KeyTerm(value.key.relabel(ident))
                    table[ident] = value
            ks._tables[proto] = table
        return ks

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path, provider=None) -> "Keystore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read(), provider)


# -- runtime context and role state ------------------------------------------------------

def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class EngineContext:
    provider: CryptoProvider = field(default_factory=default_provider)
    keystore: Optional[Keystore] = None
    clock: Callable[[], datetime] = _utcnow
    freshness_window: float = DEFAULT_WINDOW_S
    seed: Optional[object] = None

    def __post_init__(self):
        if self.keystore is None:
            self.keystore = Keystore(self.provider)

    def rng_for(self, role: str, session: str = "") -> Callable[[int], bytes]:
        if self.seed is None:
            return self.provider.randbytes
        return random.Random(f"{self.seed}|{session}|{role}").randbytes


@dataclass
class TranscriptEntry:
    step: int
    sender: str
    receiver: str
    direction: str
    wire: bytes
    size: int
    elapsed_ms: float
    term_text: str = ""


@dataclass
class RoleState:
    role: str
    spec: ProtocolSpec
    knowledge: dict
    secrets: dict = field(default_factory=dict)
    opaque: dict = field(default_factory=dict)
    step_cursor: int = 0
    transcript: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    randbytes: Callable[[int], bytes] = None

    def bind(self, ident: str, value: Term):
        if isinstance(value, KeyTerm):
            value = KeyTerm(value.key.relabel(ident))
        old = self.knowledge.get(ident)
        if old is not None and old != value:
            raise ProtocolViolation(f"{self.role}: {ident} is already bound to another value")
        self.knowledge[ident] = value

    def next_step(self) -> Optional[Step]:
        steps = self.spec.steps
        while self.step_cursor < len(steps):
            s = steps[self.step_cursor]
            if self.role in (s.sender, s.receiver):
                return s
            self.step_cursor += 1
        return None

    @property
    def finished(self) -> bool:
        return self.next_step() is None


def start_session(spec: ProtocolSpec, ctx: EngineContext, roles=None,
                  session: str = "") -> dict:
    table = ctx.keystore.table_for(spec)
    states = {}
    for role in roles or spec.roles:
        knowledge = {}
        for ident in spec.initial_knowledge[role]:
            value = table[ident]
            if isinstance(value, KeyTerm):
                value = KeyTerm(value.key.relabel(ident))
            knowledge[ident] = value
        states[role] = RoleState(role, spec, knowledge,
                                 randbytes=ctx.rng_for(role, session))
    return states


def _key_context(state: RoleState, ctx: EngineContext) -> KeyContext:
    keys = {i: v for i, v in state.knowledge.items() if isinstance(v, KeyTerm)}
    return KeyContext(ctx.provider, keys, state.spec.inverse, {}, list(state.knowledge.values()),
                      state.randbytes)


def _generate(state: RoleState, ident: str, ctx: EngineContext):
    kind = state.spec.kinds[ident]
    rb = state.randbytes
    if kind == "nonce":
        value = NonceTerm(RandomNonce(rb(16)))
    elif kind == "timestamp":
        value = NonceTerm(TimestampNonce.now(ctx.clock))
    elif kind == "key":
        value = KeyTerm(KeyMaterial(rb(ctx.provider.sk_key_length), "base64Binary", ident))
    elif kind == "dhkey":
        pair_ = CryptoProvider(ctx.provider.suite, randbytes=rb).dh_generate()
        state.secrets[ident] = pair_
        value = KeyTerm(KeyMaterial(pair_.public_part, "base64Binary", ident))
    else:
        value = Data(UserData(rb(16).hex(), "text/plain"))
    state.bind(ident, value)


def _derive(state: RoleState, ctx: EngineContext):
    for d in state.spec.derivations:
        if d.target in state.knowledge:
            continue
        a, b = d.args
        if a in state.secrets and b in state.knowledge:
            own, peer = a, b
        elif b in state.secrets and a in state.knowledge:
            own, peer = b, a
        else:
            continue
        secret = state.secrets[own].private_part
        key = ctx.provider.dh_shared(secret, state.knowledge[peer].key.value, label=d.target)
        state.bind(d.target, KeyTerm(key))


@lru_cache(maxsize=4096)
def _text(template: Term) -> str:
    return print_term(template)


def _instantiate(t: Term, state: RoleState) -> Term:
    if isinstance(t, Slot):
        try:
            return state.knowledge[t.ident]
        except KeyError:
            raise MissingKnowledge(f"{state.role} does not know {t.ident}") from None
    if isinstance(t, Pair):
        return Pair(_instantiate(t.left, state), _instantiate(t.right, state))
    if isinstance(t, Enc):
        sealed = state.opaque.get(_text(t)) if state.opaque else None
        if sealed is not None:
            return sealed
        key = None if t.key_arg is None else _instantiate(t.key_arg, state)
        return Enc(_instantiate(t.payload, state), t.func, key)
    return t


def step_construct(state: RoleState, ctx: EngineContext) -> tuple:
    """Build the envelope for the role's next step.

    Returns ``(envelope, wire_octets, elapsed_ms)``; the measured interval
    covers fresh generation, instantiation, encryption and serialization.
    """
    step = state.next_step()
    if step is None or step.sender != state.role:
        raise NotYourTurn(f"{state.role} has nothing to send now")
    t0 = time.perf_counter_ns()
    for ident in step.fresh:
        _generate(state, ident, ctx)
    _derive(state, ctx)
    term = _instantiate(step.template, state)
    env = build_envelope(term, _key_context(state, ctx))
    wire = env.to_bytes()
    elapsed = (time.perf_counter_ns() - t0) / 1e6
    state.step_cursor += 1
    state.timings.append((step.number, "construct", elapsed))
    state.transcript.append(TranscriptEntry(step.number, step.sender, step.receiver, "sent",
                                            wire, len(wire), elapsed, step.text))
    return env, wire, elapsed


class _Matcher:
    def __init__(self, state: RoleState, step: Step, plan: Optional[StepPlan]):
        self.state = state
        self.step = step
        self.plan = plan
        self.new: dict = {}
        self.opened_keys: set = set()
        self.kinds = state.spec.kinds

    def lookup(self, ident):
        if ident in self.new:
            return self.new[ident]
        return self.state.knowledge.get(ident)

    def mismatch(self, ident: str):
        if self.kinds.get(ident) in ("nonce", "timestamp"):
            raise CheckFailed("nonce-echo", f"{ident} differs from the value on record")
        raise CheckFailed(f"equality:{ident}", f"{ident} differs from the value on record")

    def bind(self, ident: str, value: Term):
        if isinstance(value, (Pair, Enc, Sealed)):
            raise ProtocolViolation(f"step {self.step.number}: expected a value for {ident}, "
                                    f"got a compound term")
        if isinstance(value, KeyTerm):
            value = KeyTerm(value.key.relabel(ident))
        known = self.lookup(ident)
        if known is None:
            self.new[ident] = value
        elif known != value:
            self.mismatch(ident)

    def match(self, tpl: Term, value: Term):
        if isinstance(tpl, Slot):
            self.bind(tpl.ident, value)
            return
        if isinstance(tpl, Pair):
            want, got = items_of(tpl), items_of(value)
            if len(want) != len(got):
                raise ProtocolViolation(f"step {self.step.number}: expected {len(want)} items, "
                                        f"got {len(got)}")
            for w, g in zip(want, got):
                self.match(w, g)
            return
        text = _text(tpl)
        if isinstance(value, Sealed):
            if self.plan is not None and text in self.plan.opens:
                if tpl.func is FuncName.H or tpl.func is FuncName.HMAC:
                    raise CheckFailed("nonce-echo" if any(
                        self.kinds.get(i) in ("nonce", "timestamp") for i in _slots(tpl.payload)
                    ) else "digest", f"{text} does not match the values on record")
                raise DecryptFailure(f"step {self.step.number}: could not open {text}")
            self.state.opaque[text] = value
            return
        if not isinstance(value, Enc) or value.func is not tpl.func:
            raise ProtocolViolation(f"step {self.step.number}: expected {text}")
        if tpl.key_arg is not None:
            ident = tpl.key_arg.ident
            got = value.key_arg
            if not isinstance(got, KeyTerm) or got.key.label != ident:
                raise ProtocolViolation(f"step {self.step.number}: {text} is under the wrong key")
            if tpl.func is not FuncName.PK:
                self.bind(ident, got)
            self.opened_keys.add(ident)
        self.match(tpl.payload, value.payload)


def step_process(state: RoleState, wire, ctx: EngineContext) -> tuple:
    """Parse, open and check an incoming envelope for the role's next step.

    Returns ``(new_bindings, elapsed_ms)``.
    """
    step = state.next_step()
    if step is None or step.receiver != state.role:
        raise NotYourTurn(f"{state.role} is not expecting a message now")
    plan = state.spec.plans[step.number - 1] if state.spec.plans else None
    t0 = time.perf_counter_ns()
    env = wire if isinstance(wire, Envelope) else parse_envelope_xml(wire)
    term = open_envelope(env, _key_context(state, ctx), allow_opaque=True)
    m = _Matcher(state, step, plan)
    m.match(step.template, term)
    for chk in step.checks:
        if chk.kind == "fresh-timestamp":
            value = m.lookup(chk.ident)
            if not (isinstance(value, NonceTerm) and isinstance(value.nonce, TimestampNonce)):
                raise CheckFailed("fresh-timestamp", f"{chk.ident} is not a timestamp")
            skew = abs((ctx.clock() - value.nonce.instant).total_seconds())
            if skew > ctx.freshness_window:
                raise CheckFailed("fresh-timestamp", f"{chk.ident} is {skew:.0f} s off")
        elif chk.kind in ("signature", "decrypt"):
            if chk.ident not in m.opened_keys:
                raise CheckFailed(chk.kind, f"nothing under {chk.ident} was verified")
        elif chk.kind == "nonce-echo":
            if m.lookup(chk.ident) != state.knowledge.get(chk.ident):
                raise CheckFailed("nonce-echo", chk.ident)
    for ident, value in m.new.items():
        state.bind(ident, value)
    _derive(state, ctx)
    elapsed = (time.perf_counter_ns() - t0) / 1e6
    state.step_cursor += 1
    state.timings.append((step.number, "process", elapsed))
    raw = wire if isinstance(wire, (bytes, bytearray)) else env.to_bytes()
    state.transcript.append(TranscriptEntry(step.number, step.sender, step.receiver, "received",
                                            bytes(raw), len(raw), elapsed, step.text))
    return dict(m.new), elapsed


# -- timing reports -------------------------------------------------------------------------

def _q(x) -> Decimal:
    return Decimal(str(x)).quantize(CENT, rounding=ROUND_HALF_EVEN)


@dataclass(frozen=True)
class TimingRow:
    participant_role: str
    construction_ms: Decimal
    processing_ms: Decimal

    @property
    def total_participant_ms(self) -> Decimal:
        return self.construction_ms + self.processing_ms


@dataclass(frozen=True)
class TimingReport:
    protocol: str
    rows: tuple

    @property
    def total_ms(self) -> Decimal:
        return sum((r.total_participant_ms for r in self.rows), Decimal("0.00"))

    def check_identities(self) -> bool:
        return (all(r.total_participant_ms == r.construction_ms + r.processing_ms
                    for r in self.rows)
                and self.total_ms == sum((r.total_participant_ms for r in self.rows),
                                         Decimal("0.00")))

    def as_records(self) -> list:
        total = self.total_ms
        return [{"participant_role": r.participant_role,
                 "construction_ms": r.construction_ms,
                 "processing_ms": r.processing_ms,
                 "total_participant_ms": r.total_participant_ms,
                 "total_ms": total} for r in self.rows]

    @classmethod
    def from_cells(cls, spec: ProtocolSpec, cells: dict) -> "TimingReport":
        """``cells`` maps (phase, side) to (construction_ms, processing_ms)."""
        rows = []
        for key in spec.row_keys():
            c, p = cells.get(key, (0, 0))
            rows.append(TimingRow(spec.row_label(*key), _q(c), _q(p)))
        return cls(spec.display, tuple(rows))

    @classmethod
    def from_timings(cls, spec: ProtocolSpec, timings) -> "TimingReport":
        return cls.from_cells(spec, aggregate(spec, timings))


def aggregate(spec: ProtocolSpec, timings) -> dict:
    """Sum (step, role, kind, ms) measurements into (phase, side) cells."""
    by_step = {s.number: s for s in spec.steps}
    cells = {k: [0.0, 0.0] for k in spec.row_keys()}
    for number, role, kind, ms in timings:
        step = by_step[number]
        key = (step.phase, spec.sides[role])
        cells[key][0 if kind == "construct" else 1] += ms
    return {k: tuple(v) for k, v in cells.items()}


def median_report(spec: ProtocolSpec, runs: list) -> TimingReport:
    """Per-cell medians over several aggregated runs."""
    keys = spec.row_keys()
    cells = {}
    for k in keys:
        cells[k] = (statistics.median(r[k][0] for r in runs),
                    statistics.median(r[k][1] for r in runs))
    return TimingReport.from_cells(spec, cells)


# -- driving a run ------------------------------------------------------------------------------

@dataclass
class RunResult:
    spec: ProtocolSpec
    states: dict
    transcript: list
    report: TimingReport
    timings: list

    def cells(self) -> dict:
        return aggregate(self.spec, self.timings)


def check_agreement(spec: ProtocolSpec, states: dict):
    for ident in spec.agree:
        values = [(r, s.knowledge[ident]) for r, s in states.items() if ident in s.knowledge]
        if len(values) < 2:
            continue
        first = values[0][1]
        for role, value in values[1:]:
            if value != first:
                raise AgreementFailure(f"{values[0][0]} and {role} disagree on {ident}")


def run_protocol(spec: ProtocolSpec, channel=None, ctx: Optional[EngineContext] = None,
                 session: Optional[str] = None, tamper=None) -> RunResult:
    """Drive every role of ``spec`` to completion.

    With no channel, or a loopback channel, all roles run here and messages
    pass through the channel.  A remote channel (see :mod:`soapsec.transport`)
    runs the Initiator-side roles locally and the rest on the server; the
    server reports its own construction and processing times.

    ``tamper`` may rewrite wire octets in flight (for integrity testing).
    """
    from .transport import LoopbackChannel

    ctx = ctx or EngineContext()
    session = session or "s-" + ctx.rng_for("session")(8).hex()
    if channel is None:
        channel = LoopbackChannel()
    remote = getattr(channel, "remote", False)
    local = [r for r in spec.roles if not remote or spec.sides[r] == "Initiator"]
    states = start_session(spec, ctx, local, session)
    timings: list = []
    transcript: list = []
    pending_reply = None
    step = None
    try:
        for step in spec.steps:
            if step.sender in states:
                _, wire, ms = step_construct(states[step.sender], ctx)
                timings.append((step.number, step.sender, "construct", ms))
                if tamper is not None:
                    wire = tamper(step, wire)
                transcript.append(TranscriptEntry(step.number, step.sender, step.receiver,
                                                  "sent", wire, len(wire), ms, step.text))
                if step.receiver in states:
                    channel.send(wire)
                    got = channel.receive()
                    _, ms = step_process(states[step.receiver], got, ctx)
                    timings.append((step.number, step.receiver, "process", ms))
                else:
                    reply = channel.exchange(spec.name, session, step.number, wire)
                    for number, role, kind, rms in reply.timings:
                        timings.append((number, role, kind, rms))
                    pending_reply = reply.wire
            else:
                if step.receiver not in states:
                    raise ProtocolError(f"step {step.number} runs entirely remotely")
                wire = pending_reply
                if wire is None:
                    reply = channel.exchange(spec.name, session, step.number, None)
                    for number, role, kind, rms in reply.timings:
                        timings.append((number, role, kind, rms))
                    wire = reply.wire
                if wire is None:
                    raise ProtocolError(f"no envelope arrived for step {step.number}")
                pending_reply = None
                if tamper is not None:
                    wire = tamper(step, wire)
                transcript.append(TranscriptEntry(step.number, step.sender, step.receiver,
                                                  "sent", wire, len(wire), 0.0, step.text))
                _, ms = step_process(states[step.receiver], wire, ctx)
                timings.append((step.number, step.receiver, "process", ms))
    except SoapSecError as exc:
        # keep the original error type; attach what happened so far
        exc.transcript = transcript
        exc.failed_step = None if step is None else step.number
        raise
    check_agreement(spec, states)
    report = TimingReport.from_timings(spec, timings)
    return RunResult(spec, states, transcript, report, timings)


def describe_knowledge(state: RoleState) -> dict:
    out = {}
    table = SymbolTable(state.knowledge)
    for ident, value in state.knowledge.items():
        out[ident] = print_term(value, table)
    return out


__all__ = [
    "Check", "Step", "Derivation", "ProtocolSpec", "RoleState", "TimingRow", "TimingReport",
    "EngineContext", "Keystore", "RunResult", "TranscriptEntry", "parse_protocol",
    "check_executability", "register_builtin_protocols", "register_protocol", "get_protocol",
    "list_protocols", "start_session", "step_construct", "step_process", "run_protocol",
    "check_agreement", "aggregate", "median_report",
]
