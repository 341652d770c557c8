import csv
import io
import json
import signal
import subprocess
import sys

import pytest

from soapsec.cli import main
from soapsec.engine import EngineContext
from soapsec.crypto import CryptoProvider
from soapsec.transport import serve


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestValidate:
    @pytest.mark.parametrize("kind,value,code", [
        ("ipv4", "10.0.0.1", 0), ("ipv4", "10.0.0", 1), ("domain", "example.org", 0),
        ("domain", "a", 1), ("ipv6", "1:2:3:4:5:6:7:8", 0), ("userdomain", "a.b", 0)])
    def test_exit_codes(self, capsys, kind, value, code):
        assert run(capsys, "validate", kind, value)[0] == code

    def test_strict(self, capsys):
        assert run(capsys, "validate", "ipv4", "999.1.1.1")[0] == 0
        assert run(capsys, "validate", "ipv4", "999.1.1.1", "--strict")[0] == 1

    def test_unknown_kind_is_usage(self, capsys):
        code, _, err = run(capsys, "validate", "email", "a@b")
        assert code == 2 and "unknown token kind" in err


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys)[0] == 2

    def test_help(self, capsys):
        assert run(capsys, "--help")[0] == 0

    @pytest.mark.parametrize("argv", [
        ["bench-micro", "--iterations", "0"], ["bench-micro", "--sizes", "1,x"],
        ["run", "lowe-ban", "--transport", "pigeon"], ["run", "nope"],
        ["run", "lowe-ban", "--transport", "http"]])
    def test_bad_arguments(self, capsys, argv):
        assert run(capsys, *argv)[0] == 2


class TestCommands:
    def test_list(self, capsys):
        code, out, _ = run(capsys, "list-protocols")
        assert code == 0
        assert [line.split()[0] for line in out.splitlines()] == [
            "lowe-ban", "iso9798", "kerberos", "ccitt-x509", "andrew-rpc"]

    def test_encode(self, capsys):
        code, out, err = run(capsys, "encode", "{A,Na}sk(K),M", "--decl", "A = name alice",
                             "--decl", "Na = nonce", "--decl", "K = key", "--decl", "M = data hi")
        assert code == 0
        assert out.startswith("<env:Envelope") and "EncryptedBlock" in out
        assert "{A,Na}sk(K),M" in err

    def test_encode_symbol_file(self, capsys, tmp_path):
        f = tmp_path / "syms"
        f.write_text("A = ipv4 10.0.0.1\n")
        code, out, _ = run(capsys, "encode", "A", "--symbols", str(f))
        assert code == 0 and "<IPv4>10.0.0.1</IPv4>" in out

    def test_encode_unbound(self, capsys):
        assert run(capsys, "encode", "A,B", "--decl", "A = name a")[0] == 2

    def test_run(self, capsys):
        code, out, _ = run(capsys, "run", "kerberos")
        assert code == 0
        assert out.splitlines()[0].startswith("1. C -> AS: C,TGS,N1")
        assert "completed" in out

    def test_run_dead_endpoint(self, capsys):
        code, _, err = run(capsys, "run", "lowe-ban", "--transport", "http", "--endpoint",
                           "http://127.0.0.1:9/soap", "--timeout", "0.2")
        assert code == 1 and "Timeout" in err

    def test_run_against_server(self, capsys, tmp_path):
        keys = tmp_path / "keys.json"
        assert run(capsys, "keygen", str(keys))[0] == 0
        from soapsec.engine import Keystore
        provider = CryptoProvider()
        ctx = EngineContext(provider, Keystore.load(keys, provider))
        with serve("tcp", ctx=ctx) as srv:
            code, out, _ = run(capsys, "run", "ccitt-x509", "--transport", "tcp",
                               "--endpoint", srv.url, "--keys", str(keys))
        assert code == 0 and "completed" in out

    def test_mismatched_keys_fail(self, capsys):
        with serve("http", ctx=EngineContext(CryptoProvider())) as srv:
            code, _, err = run(capsys, "run", "lowe-ban", "--transport", "http",
                               "--endpoint", srv.url)
        assert code == 1 and "aborted" in err

    def test_bench_protocol_csv(self, capsys):
        code, out, _ = run(capsys, "bench-protocol", "lowe-ban", "--iterations", "3",
                           "--warmup", "0", "--format", "csv")
        assert code == 0
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0] == ["participant_role", "construction_ms", "processing_ms",
                           "total_participant_ms", "total_ms"]
        assert [r[0] for r in rows[1:]] == ["Lowe-BAN Initiator", "Lowe-BAN Respondent"]

    def test_bench_micro_json(self, capsys):
        code, out, _ = run(capsys, "bench-micro", "--iterations", "2", "--warmup", "0",
                           "--sizes", "32,64", "--format", "json")
        assert code == 0
        records = json.loads(out)
        assert [r["size"] for r in records] == [32, 64]
        assert {"plain_ms", "sk_ms", "pk_ms", "sk_over_plain"} <= set(records[0])

    def test_single_iteration_one_row_per_size(self, capsys):
        code, out, _ = run(capsys, "bench-micro", "--iterations", "1", "--warmup", "0",
                           "--sizes", "16,32,48", "--format", "csv")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [r["size"] for r in rows] == ["16", "32", "48"]
        assert all(r["iterations"] == "1" for r in rows)

    def test_csv_reparses_to_report_numbers(self, capsys):
        from decimal import Decimal
        code, out, _ = run(capsys, "bench-protocol", "kerberos", "--iterations", "2",
                           "--warmup", "0", "--format", "csv")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert len(rows) == 6
        total = Decimal(rows[0]["total_ms"])
        for r in rows:
            c, p, t = (Decimal(r[k]) for k in ("construction_ms", "processing_ms",
                                               "total_participant_ms"))
            assert c + p == t and Decimal(r["total_ms"]) == total
        assert sum(Decimal(r["total_participant_ms"]) for r in rows) == total


@pytest.mark.skipif(not hasattr(signal, "SIGTERM"), reason="needs SIGTERM")
def test_serve_stops_on_sigterm():
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    proc = subprocess.Popen([sys.executable, "-m", "soapsec", "serve", "--port", str(port)],
                            stdout=subprocess.PIPE, text=True)
    try:
        assert proc.stdout.readline().startswith("serving http")
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
