"""Channels between protocol roles, and a responder endpoint.

``LoopbackChannel`` is an in-memory queue.  ``HttpChannel`` POSTs envelopes
(``Content-Type: application/soap+xml``) and ``TcpChannel`` sends
length-prefixed frames; both talk to :func:`serve`, which runs the
non-Initiator roles of each session.

Sessions are correlated outside the envelope: by the ``X-Protocol-Name``,
``X-Session-Id`` and ``X-Step`` HTTP headers, or by a JSON header inside
each TCP frame::

    frame   = length(4, big-endian) || payload
    payload = header_length(2, big-endian) || header(JSON) || envelope

The responder answers with the next envelope of the run, or with nothing
when the next move belongs to the client.  Its construction and processing
times travel back in ``X-Timings`` (a JSON list of
``[step, role, kind, ms]``), with ``X-Construct-Ms``/``X-Process-Ms`` totals.
"""

from __future__ import annotations

import http.client
import json
import queue
import socket
import socketserver
import struct
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import urlsplit

from . import xmlutil as X
from .engine import EngineContext, get_protocol, start_session, step_construct, step_process
from .errors import (
    BindError,
    ChannelClosed,
    CheckFailed,
    DecryptFailure,
    EnvelopeError,
    MalformedEnvelope,
    NotYourTurn,
    ProtocolError,
    ProtocolViolation,
    RemoteFault,
    SoapSecError,
    Timeout,
    TokenError,
    TransportError,
)

SOAP_CONTENT_TYPE = "application/soap+xml"
SESSION_HEADER = "X-Session-Id"
PROTOCOL_HEADER = "X-Protocol-Name"
STEP_HEADER = "X-Step"
TIMINGS_HEADER = "X-Timings"
MAX_MESSAGE = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 10.0


@dataclass
class ChannelStats:
    sent: int = 0
    received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    last_latency_ms: float = 0.0
    sizes: list = field(default_factory=list)


@dataclass(frozen=True)
class Receipt:
    sequence: int
    size: int


@dataclass
class Reply:
    wire: Optional[bytes]
    timings: list


class Channel:
    kind = "abstract"
    remote = False

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.stats = ChannelStats()
        self.closed = False

    def _check_open(self):
        if self.closed:
            raise ChannelClosed(f"{self.kind} channel is closed")

    def _count_out(self, wire: bytes) -> Receipt:
        self.stats.sent += 1
        self.stats.bytes_sent += len(wire)
        self.stats.sizes.append(len(wire))
        return Receipt(self.stats.sent, len(wire))

    def _count_in(self, wire: bytes):
        self.stats.received += 1
        self.stats.bytes_received += len(wire)

    def close(self):
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackChannel(Channel):
    """In-order, in-memory delivery; ``receive`` blocks up to the timeout."""

    kind = "loopback"

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(timeout)
        self._q: queue.Queue = queue.Queue()

    def send(self, wire: bytes) -> Receipt:
        self._check_open()
        wire = bytes(wire)
        self._q.put(wire)
        return self._count_out(wire)

    def receive(self, timeout: Optional[float] = None) -> bytes:
        self._check_open()
        wait = self.timeout if timeout is None else timeout
        try:
            wire = self._q.get(timeout=wait)
        except queue.Empty:
            raise Timeout(f"nothing arrived within {wait * 1000:.0f} ms") from None
        self._count_in(wire)
        return wire


# -- faults ---------------------------------------------------------------------

FAULT_SUBCODES = {
    "UnknownProtocol": "Sender",
    "MalformedMessage": "Sender",
    "CheckFailed": "Sender",
    "DecryptFailure": "Sender",
    "ProtocolViolation": "Sender",
    "OutOfSequence": "Sender",
    "InternalError": "Receiver",
}


def fault_document(subcode: str, reason: str) -> bytes:
    code = FAULT_SUBCODES.get(subcode, "Receiver")
    env = ET.Element(X.qn(X.SOAP_NS, "Envelope"))
    body = ET.SubElement(env, X.qn(X.SOAP_NS, "Body"))
    fault = ET.SubElement(body, X.qn(X.SOAP_NS, "Fault"))
    code_el = ET.SubElement(fault, X.qn(X.SOAP_NS, "Code"))
    ET.SubElement(code_el, X.qn(X.SOAP_NS, "Value")).text = f"env:{code}"
    sub = ET.SubElement(code_el, X.qn(X.SOAP_NS, "Subcode"))
    ET.SubElement(sub, X.qn(X.SOAP_NS, "Value")).text = subcode
    reason_el = ET.SubElement(fault, X.qn(X.SOAP_NS, "Reason"))
    ET.SubElement(reason_el, X.qn(X.SOAP_NS, "Text"),
                  {X.qn(X.XML_NS, "lang"): "en"}).text = reason
    return X.canonical_bytes(env)


def parse_fault(data: bytes) -> Optional[RemoteFault]:
    try:
        root = X.parse_xml(data)
    except MalformedEnvelope:
        return None
    fault = root.find(f".//{X.qn(X.SOAP_NS, 'Fault')}")
    if fault is None:
        return None
    v = X.qn(X.SOAP_NS, "Value")
    code = fault.findtext(f"{X.qn(X.SOAP_NS, 'Code')}/{v}", "")
    sub = fault.findtext(f"{X.qn(X.SOAP_NS, 'Code')}/{X.qn(X.SOAP_NS, 'Subcode')}/{v}", "")
    reason = fault.findtext(f"{X.qn(X.SOAP_NS, 'Reason')}/{X.qn(X.SOAP_NS, 'Text')}", "")
    return RemoteFault(code.split(":")[-1], sub, reason)


def classify(exc: Exception) -> str:
    if isinstance(exc, KeyError):
        return "UnknownProtocol"
    if isinstance(exc, (MalformedEnvelope, TokenError)):
        return "MalformedMessage"
    if isinstance(exc, CheckFailed):
        return "CheckFailed"
    if isinstance(exc, DecryptFailure):
        return "DecryptFailure"
    if isinstance(exc, NotYourTurn):
        return "OutOfSequence"
    if isinstance(exc, (ProtocolViolation, ProtocolError, EnvelopeError, SoapSecError)):
        return "ProtocolViolation"
    return "InternalError"


# -- responder ----------------------------------------------------------------------

class Responder:
    """Runs the server-side roles of every session it is asked about."""

    def __init__(self, ctx: Optional[EngineContext] = None):
        self.ctx = ctx or EngineContext()
        self._sessions: dict = {}
        self._lock = threading.Lock()

    def _session(self, spec, session: str):
        key = (spec.name, session)
        with self._lock:
            entry = self._sessions.get(key)
            if entry is None:
                roles = [r for r in spec.roles if spec.sides[r] != "Initiator"]
                entry = (threading.Lock(), start_session(spec, self.ctx, roles, session))
                self._sessions[key] = entry
            return key, entry

    def handle(self, protocol: str, session: str, step_no: int,
               wire: Optional[bytes]) -> Reply:
        spec = get_protocol(protocol)
        key, (lock, states) = self._session(spec, session)
        timings = []
        reply = None
        with lock:
            try:
                if wire:
                    if not 1 <= step_no <= len(spec.steps):
                        raise ProtocolViolation(f"no step {step_no} in {spec.name}")
                    step = spec.steps[step_no - 1]
                    state = states.get(step.receiver)
                    if state is None:
                        raise ProtocolViolation(f"step {step_no} is not addressed to this server")
                    if state.next_step() is not step:
                        raise NotYourTurn(f"{step.receiver} is not expecting step {step_no}")
                    _, ms = step_process(state, wire, self.ctx)
                    timings.append((step.number, step.receiver, "process", ms))
                while True:
                    nxt = self._next_local(spec, states)
                    if nxt is None:
                        break
                    _, out, ms = step_construct(states[nxt.sender], self.ctx)
                    timings.append((nxt.number, nxt.sender, "construct", ms))
                    if nxt.receiver in states:
                        _, pms = step_process(states[nxt.receiver], out, self.ctx)
                        timings.append((nxt.number, nxt.receiver, "process", pms))
                        continue
                    reply = out
                    break
            except Exception:
                with self._lock:
                    self._sessions.pop(key, None)
                raise
            if all(s.finished for s in states.values()):
                with self._lock:
                    self._sessions.pop(key, None)
        return Reply(reply, timings)

    @staticmethod
    def _next_local(spec, states):
        pending = [s.next_step() for s in states.values()]
        pending = [p for p in pending if p is not None]
        if not pending:
            return None
        first = min(pending, key=lambda s: s.number)
        return first if first.sender in states else None

    @property
    def active_sessions(self) -> int:
        with self._lock:
            return len(self._sessions)


def _timing_headers(timings) -> dict:
    construct = sum(ms for _, _, kind, ms in timings if kind == "construct")
    process = sum(ms for _, _, kind, ms in timings if kind == "process")
    return {TIMINGS_HEADER: json.dumps([list(t) for t in timings]),
            "X-Construct-Ms": f"{construct:.3f}", "X-Process-Ms": f"{process:.3f}"}


class _HttpHandler(BaseHTTPRequestHandler):
    server_version = "soapsec"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, body: bytes, headers: Optional[dict] = None):
        self.send_response(status)
        self.send_header("Content-Type", f"{SOAP_CONTENT_TYPE}; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _fault(self, subcode: str, reason: str):
        status = 400 if FAULT_SUBCODES.get(subcode) == "Sender" else 500
        self._send(status, fault_document(subcode, reason))

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if not 0 <= length <= MAX_MESSAGE:
            self.close_connection = True
            return self._fault("MalformedMessage", "bad Content-Length")
        body = self.rfile.read(length)
        ctype = self.headers.get("Content-Type", "")
        if not ctype.startswith(SOAP_CONTENT_TYPE):
            return self._fault("MalformedMessage", f"expected {SOAP_CONTENT_TYPE}")
        path = urlsplit(self.path).path
        if path.rstrip("/").endswith("/echo"):
            return self._send(200, body)
        protocol = self.headers.get(PROTOCOL_HEADER)
        session = self.headers.get(SESSION_HEADER)
        if not protocol or not session:
            return self._fault("MalformedMessage",
                               f"{PROTOCOL_HEADER} and {SESSION_HEADER} headers are required")
        try:
            step_no = int(self.headers.get(STEP_HEADER, "0"))
            reply = self.server.responder.handle(protocol, session, step_no, body or None)
        except Exception as exc:  # every failure becomes a fault; the server stays up
            return self._fault(classify(exc), f"{type(exc).__name__}: {exc}")
        headers = _timing_headers(reply.timings)
        if reply.wire is None:
            self.send_response(204)
            for k, v in headers.items():
                self.send_header(k, v)
            self.send_header("Content-Length", "0")
            self.end_headers()
        else:
            self._send(200, reply.wire, headers)


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                header, payload = read_frame(sock)
            except (ChannelClosed, TransportError, OSError):
                return
            try:
                if header.get("op") == "echo":
                    write_frame(sock, {"status": "ok"}, payload)
                    continue
                reply = self.server.responder.handle(header["protocol"], header["session"],
                                                     int(header.get("step", 0)),
                                                     payload or None)
                write_frame(sock, {"status": "ok", "timings": [list(t) for t in reply.timings],
                                   "empty": reply.wire is None}, reply.wire or b"")
            except Exception as exc:
                sub = classify(exc)
                try:
                    write_frame(sock, {"status": "fault", "subcode": sub},
                                fault_document(sub, f"{type(exc).__name__}: {exc}"))
                except OSError:
                    return


def write_frame(sock, header: dict, envelope: bytes):
    h = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = struct.pack(">H", len(h)) + h + envelope
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 65536))
        if not chunk:
            raise ChannelClosed("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> tuple:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length < 2 or length > MAX_MESSAGE:
        raise TransportError(f"frame length {length} out of range")
    payload = _recv_exact(sock, length)
    (hlen,) = struct.unpack(">H", payload[:2])
    try:
        header = json.loads(payload[2:2 + hlen])
    except ValueError:
        raise TransportError("frame header is not JSON") from None
    return header, payload[2 + hlen:]


class _ThreadingTcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _ThreadingHttpServer(ThreadingHTTPServer):
    daemon_threads = True


class Server:
    """A running responder endpoint; use as a context manager or call shutdown()."""

    def __init__(self, kind: str, host: str, port: int, ctx: Optional[EngineContext] = None,
                 path: str = "/soap"):
        self.kind = kind
        self.responder = Responder(ctx)
        self.path = path
        cls = _ThreadingHttpServer if kind == "http" else _ThreadingTcpServer
        handler = _HttpHandler if kind == "http" else _TcpHandler
        try:
            self._srv = cls((host, port), handler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from None
        self._srv.responder = self.responder
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True,
                                        name=f"soapsec-{kind}-server")

    @property
    def address(self) -> tuple:
        return self._srv.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        scheme = "http" if self.kind == "http" else "tcp"
        return f"{scheme}://{host}:{port}" + (self.path if self.kind == "http" else "")

    def start(self) -> "Server":
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def shutdown(self):
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(kind: str = "http", host: str = "127.0.0.1", port: int = 0,
          ctx: Optional[EngineContext] = None, background: bool = True) -> Server:
    if kind not in ("http", "tcp"):
        raise ValueError(f"unknown server kind {kind!r}")
    srv = Server(kind, host, port, ctx)
    if background:
        srv.start()
    return srv


# -- client channels -------------------------------------------------------------------

def _parse_timings(raw) -> list:
    return [(int(s), str(r), str(k), float(ms)) for s, r, k, ms in raw]


class HttpChannel(Channel):
    kind = "http_post"
    remote = True

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(timeout)
        parts = urlsplit(endpoint)
        if parts.scheme != "http" or not parts.hostname:
            raise ValueError(f"not an http endpoint: {endpoint!r}")
        self.host = parts.hostname
        self.port = parts.port or 80
        self.path = parts.path or "/soap"
        self._echoed: queue.Queue = queue.Queue()

    def _post(self, path: str, body: bytes, headers: dict) -> tuple:
        self._check_open()
        deadline = time.monotonic() + self.timeout
        last = None
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout(f"no answer from {self.host}:{self.port} within "
                              f"{self.timeout:.1f} s ({last})")
            conn = http.client.HTTPConnection(self.host, self.port, timeout=remaining)
            try:
                t0 = time.perf_counter()
                conn.request("POST", path, body,
                             {"Content-Type": f"{SOAP_CONTENT_TYPE}; charset=utf-8", **headers})
                resp = conn.getresponse()
                data = resp.read()
                self.stats.last_latency_ms = (time.perf_counter() - t0) * 1000
                return resp.status, dict(resp.getheaders()), data
            except (ConnectionRefusedError, ConnectionResetError) as exc:
                last = exc
                time.sleep(min(0.05, max(remaining, 0)))
            except socket.timeout:
                raise Timeout(f"{self.host}:{self.port} did not answer in time") from None
            except OSError as exc:
                last = exc
                time.sleep(min(0.05, max(remaining, 0)))
            finally:
                conn.close()

    def send(self, wire: bytes) -> Receipt:
        """Round-trip through the server's echo path."""
        echo = self.path.rstrip("/") + "/echo"
        status, _, data = self._post(echo, bytes(wire), {})
        if status != 200:
            raise parse_fault(data) or TransportError(f"HTTP {status}")
        self._echoed.put(data)
        return self._count_out(bytes(wire))

    def receive(self, timeout: Optional[float] = None) -> bytes:
        self._check_open()
        try:
            data = self._echoed.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise Timeout("nothing to receive") from None
        self._count_in(data)
        return data

    def exchange(self, protocol: str, session: str, step: int,
                 wire: Optional[bytes]) -> Reply:
        body = bytes(wire or b"")
        if body:
            self._count_out(body)
        status, headers, data = self._post(self.path, body, {
            PROTOCOL_HEADER: protocol, SESSION_HEADER: session, STEP_HEADER: str(step)})
        if status not in (200, 204):
            raise parse_fault(data) or TransportError(f"HTTP {status}")
        timings = _parse_timings(json.loads(headers.get(TIMINGS_HEADER, "[]")))
        if status == 204 or not data:
            return Reply(None, timings)
        self._count_in(data)
        return Reply(data, timings)


class TcpChannel(Channel):
    kind = "tcp"
    remote = True

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(timeout)
        parts = urlsplit(endpoint if "//" in endpoint else "tcp://" + endpoint)
        if not parts.hostname or not parts.port:
            raise ValueError(f"not a tcp endpoint: {endpoint!r}")
        self.host, self.port = parts.hostname, parts.port
        self._sock: Optional[socket.socket] = None
        self._echoed: queue.Queue = queue.Queue()

    def _connect(self) -> socket.socket:
        self._check_open()
        if self._sock is not None:
            return self._sock
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection((self.host, self.port),
                                                timeout=max(deadline - time.monotonic(), 0.01))
                sock.settimeout(self.timeout)
                self._sock = sock
                return sock
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise Timeout(f"cannot reach {self.host}:{self.port}: {exc}") from None
                time.sleep(0.05)

    def _roundtrip(self, header: dict, body: bytes) -> tuple:
        sock = self._connect()
        t0 = time.perf_counter()
        try:
            write_frame(sock, header, body)
            reply = read_frame(sock)
        except socket.timeout:
            self.close()
            raise Timeout(f"{self.host}:{self.port} did not answer in time") from None
        except OSError as exc:
            self.close()
            raise ChannelClosed(str(exc)) from None
        self.stats.last_latency_ms = (time.perf_counter() - t0) * 1000
        return reply

    def send(self, wire: bytes) -> Receipt:
        header, data = self._roundtrip({"op": "echo"}, bytes(wire))
        self._echoed.put(data)
        return self._count_out(bytes(wire))

    def receive(self, timeout: Optional[float] = None) -> bytes:
        self._check_open()
        try:
            data = self._echoed.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise Timeout("nothing to receive") from None
        self._count_in(data)
        return data

    def exchange(self, protocol: str, session: str, step: int,
                 wire: Optional[bytes]) -> Reply:
        body = bytes(wire or b"")
        if body:
            self._count_out(body)
        header, data = self._roundtrip({"op": "step", "protocol": protocol,
                                        "session": session, "step": step}, body)
        if header.get("status") == "fault":
            raise parse_fault(data) or TransportError("remote fault")
        timings = _parse_timings(header.get("timings", []))
        if header.get("empty"):
            return Reply(None, timings)
        self._count_in(data)
        return Reply(data, timings)

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
        super().close()


def open_channel(kind: str, endpoint: Optional[str] = None,
                 timeout: float = DEFAULT_TIMEOUT) -> Channel:
    if kind == "loopback":
        return LoopbackChannel(timeout)
    if endpoint is None:
        raise ValueError(f"{kind} transport needs an endpoint")
    if kind in ("http", "http_post"):
        return HttpChannel(endpoint, timeout)
    if kind == "tcp":
        return TcpChannel(endpoint, timeout)
    raise ValueError(f"unknown transport {kind!r}")
