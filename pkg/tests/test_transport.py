import http.client
import socket

import pytest

from soapsec.crypto import CryptoProvider
from soapsec.engine import EngineContext, get_protocol, run_protocol
from soapsec.errors import BindError, ChannelClosed, RemoteFault, SoapSecError, Timeout
from soapsec.transport import (
    HttpChannel,
    LoopbackChannel,
    Responder,
    TcpChannel,
    fault_document,
    open_channel,
    parse_fault,
    serve,
)

NAMES = ["lowe-ban", "iso9798", "kerberos", "ccitt-x509", "andrew-rpc"]


@pytest.fixture(scope="module")
def ctx():
    return EngineContext(CryptoProvider())


@pytest.fixture(scope="module")
def http_server(ctx):
    with serve("http", ctx=ctx) as srv:
        yield srv


@pytest.fixture(scope="module")
def tcp_server(ctx):
    with serve("tcp", ctx=ctx) as srv:
        yield srv


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


class TestLoopback:
    def test_fifo(self):
        ch = LoopbackChannel()
        ch.send(b"one")
        ch.send(b"two")
        assert ch.receive() == b"one" and ch.receive() == b"two"
        assert ch.stats.sent == 2 and ch.stats.bytes_received == 6

    def test_timeout(self):
        with pytest.raises(Timeout):
            LoopbackChannel(timeout=0.01).receive()

    def test_closed(self):
        ch = LoopbackChannel()
        ch.close()
        with pytest.raises(ChannelClosed):
            ch.send(b"x")


@pytest.mark.parametrize("name", NAMES)
def test_http_runs(ctx, http_server, name):
    with HttpChannel(http_server.url, timeout=5) as ch:
        result = run_protocol(get_protocol(name), ch, ctx)
    assert result.report.check_identities()
    assert http_server.responder.active_sessions == 0


@pytest.mark.parametrize("name", NAMES)
def test_tcp_runs(ctx, tcp_server, name):
    with TcpChannel(tcp_server.url, timeout=5) as ch:
        result = run_protocol(get_protocol(name), ch, ctx)
    assert result.report.check_identities()


def test_server_reports_its_side(ctx, http_server):
    spec = get_protocol("kerberos")
    with HttpChannel(http_server.url) as ch:
        result = run_protocol(spec, ch, ctx)
    roles = {role for _, role, _, _ in result.timings}
    assert roles == {"C", "AS", "TGS", "V"}
    assert all(r.construction_ms + r.processing_ms > 0 for r in result.report.rows)


def test_transparent_channels(http_server, tcp_server):
    for ch in (LoopbackChannel(), HttpChannel(http_server.url), TcpChannel(tcp_server.url)):
        with ch:
            ch.send(b"<opaque/>")
            assert ch.receive() == b"<opaque/>"


def test_tampered_message_faults(ctx, http_server):
    spec = get_protocol("ccitt-x509")

    def tamper(step, wire):
        text = wire.decode()
        i = text.index("<EncryptedBlock")
        i = text.index(">", i) + 3
        return (text[:i] + ("A" if text[i] != "A" else "B") + text[i + 1:]).encode()

    with HttpChannel(http_server.url) as ch, pytest.raises(RemoteFault) as err:
        run_protocol(spec, ch, ctx, tamper=tamper)
    assert err.value.code == "Sender"
    assert http_server.responder.active_sessions == 0


class TestFaults:
    def _post(self, srv, body, headers):
        host, port = srv.address
        conn = http.client.HTTPConnection(host, port, timeout=5)
        conn.request("POST", "/soap", body, headers)
        resp = conn.getresponse()
        data = resp.read()
        conn.close()
        return resp.status, data

    def test_malformed_xml(self, http_server):
        status, data = self._post(http_server, b"<broken", {
            "Content-Type": "application/soap+xml", "X-Protocol-Name": "lowe-ban",
            "X-Session-Id": "bad-xml", "X-Step": "1"})
        assert status == 400
        assert parse_fault(data).subcode == "MalformedMessage"

    def test_unknown_protocol(self, http_server):
        status, data = self._post(http_server, b"<x/>", {
            "Content-Type": "application/soap+xml", "X-Protocol-Name": "nope",
            "X-Session-Id": "s", "X-Step": "1"})
        assert status == 400
        assert parse_fault(data).subcode == "UnknownProtocol"

    def test_wrong_content_type(self, http_server):
        status, data = self._post(http_server, b"<x/>", {"Content-Type": "text/plain"})
        assert status == 400
        assert parse_fault(data).subcode == "MalformedMessage"

    def test_missing_session_headers(self, http_server):
        status, _ = self._post(http_server, b"<x/>", {"Content-Type": "application/soap+xml"})
        assert status == 400

    def test_tcp_unknown_protocol(self, tcp_server):
        with TcpChannel(tcp_server.url) as ch, pytest.raises(RemoteFault) as err:
            ch.exchange("nope", "s", 1, b"<x/>")
        assert err.value.subcode == "UnknownProtocol"

    def test_out_of_sequence(self, ctx):
        r = Responder(ctx)
        with pytest.raises(SoapSecError):
            r.handle("lowe-ban", "s", 3, b"<x/>")
        assert r.active_sessions == 0

    def test_fault_document_round_trip(self):
        fault = parse_fault(fault_document("CheckFailed", "nonce-echo"))
        assert (fault.code, fault.subcode, fault.reason) == ("Sender", "CheckFailed",
                                                             "nonce-echo")
        assert parse_fault(b"<not-a-fault/>") is None


class TestEndpoints:
    def test_dead_http_endpoint(self):
        with HttpChannel(f"http://127.0.0.1:{_free_port()}/soap", timeout=0.3) as ch:
            with pytest.raises(Timeout):
                ch.exchange("lowe-ban", "s", 1, b"<x/>")

    def test_dead_tcp_endpoint(self):
        with TcpChannel(f"127.0.0.1:{_free_port()}", timeout=0.3) as ch:
            with pytest.raises(Timeout):
                ch.send(b"x")

    def test_port_in_use(self, http_server):
        host, port = http_server.address
        with pytest.raises(BindError):
            serve("http", host, port)

    def test_open_channel(self):
        assert isinstance(open_channel("loopback"), LoopbackChannel)
        with pytest.raises(ValueError):
            open_channel("http")
        with pytest.raises(ValueError):
            open_channel("pigeon", "x")
        with pytest.raises(ValueError):
            HttpChannel("ftp://example.org")
