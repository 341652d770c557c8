"""Command-line front end (``soapsec`` / ``python -m soapsec``).

Exit codes: 0 success, 1 domain failure (rejected value, aborted run,
unreachable endpoint), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import signal
import sys
from decimal import Decimal

from .bench import DEFAULT_SIZES, BenchConfig, bench_micro, bench_protocol
from .crypto import SUITES, CryptoProvider, get_suite
from .engine import EngineContext, Keystore, get_protocol, list_protocols, \
    register_builtin_protocols, run_protocol
from .envelope import KeyContext, build_envelope
from .errors import ConfigError, SoapSecError, TermError, UnknownAlgorithm
from .terms import SymbolTable, parse_term, print_term
from .tokens import PATTERNS, validate_name
from .transport import open_channel, serve

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

KINDS = {"userdomain": "UserDomain", "ipv4": "IPv4", "ipv6": "IPv6", "domain": "Domain"}
REPORT_COLUMNS = ("participant_role", "construction_ms", "processing_ms",
                  "total_participant_ms", "total_ms")


class UsageError(Exception):
    pass


def _sizes(text: str) -> tuple:
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes or any(s <= 0 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def _non_negative(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError("must not be negative")
    return n


def _context(args) -> EngineContext:
    provider = CryptoProvider(get_suite(args.suite))
    keystore = Keystore.load(args.keys, provider) if args.keys else Keystore(provider)
    return EngineContext(provider, keystore)


# -- output ----------------------------------------------------------------------------

def _render(records: list, columns, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(records, indent=2,
                          default=lambda v: str(v) if isinstance(v, Decimal) else v)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(records)
        return buf.getvalue().rstrip("\n")
    widths = [max(len(c), *(len(str(r[c])) for r in records)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    for r in records:
        lines.append("  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)


def report_records(report) -> list:
    return report.as_records()


# -- subcommands ----------------------------------------------------------------------

def cmd_validate(args) -> int:
    kind = KINDS.get(args.kind.lower())
    if kind is None:
        raise UsageError(f"unknown token kind {args.kind!r}; choose from {', '.join(KINDS)}")
    ok = validate_name(kind, args.value, strict=args.strict)
    shown = "strict RFC syntax" if args.strict else PATTERNS[kind]
    print(f"{'accept' if ok else 'reject'}  {kind}  {args.value!r}  pattern: {shown}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_encode(args) -> int:
    if args.symbols:
        with open(args.symbols, encoding="utf-8") as fh:
            decl_text = fh.read()
    else:
        decl_text = "\n".join(args.decl or ())
    provider = CryptoProvider(get_suite(args.suite))
    try:
        table = SymbolTable.load(decl_text, provider)
        term = parse_term(args.term, table)
    except TermError as exc:
        raise UsageError(str(exc)) from None
    env = build_envelope(term, KeyContext.from_table(table, provider))
    print(env.to_xml())
    print(f"# {print_term(term, table)}  ({len(env.to_bytes())} octets)", file=sys.stderr)
    return EXIT_OK


def cmd_list(args) -> int:
    for spec in list_protocols():
        kinds = "asymmetric" if spec.asymmetric else "symmetric"
        print(f"{spec.name:<12} {spec.display:<14} {len(spec.roles)} roles  "
              f"{len(spec.steps)} steps  {kinds}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = get_protocol(args.protocol)
    ctx = _context(args)
    channel = open_channel(args.transport, args.endpoint, args.timeout)
    try:
        result = run_protocol(spec, channel, ctx)
    except SoapSecError as exc:
        for entry in getattr(exc, "transcript", []):
            print(f"{entry.step}. {entry.sender} -> {entry.receiver}: {entry.term_text} "
                  f"[{entry.size} octets]")
        step = getattr(exc, "failed_step", None)
        print(f"{spec.display}: aborted at step {step}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_FAIL
    finally:
        channel.close()
    for entry in result.transcript:
        print(f"{entry.step}. {entry.sender} -> {entry.receiver}: {entry.term_text} "
              f"[{entry.size} octets]")
        if args.dump_xml:
            print(entry.wire.decode("utf-8"))
    print(f"{spec.display}: completed, agreement on {', '.join(spec.agree) or 'nothing'}")
    return EXIT_OK


MICRO_COLUMNS = ("size", "plain_ms", "sk_ms", "pk_ms", "plain_spread_ms", "sk_spread_ms",
                 "pk_spread_ms", "sk_over_plain", "pk_over_sk", "iterations")


def micro_records(rows) -> list:
    """One record per payload size, the three modes side by side."""
    by_size: dict = {}
    for r in rows:
        by_size.setdefault(r.size, {})[r.mode] = r
    out = []
    for size, modes in by_size.items():
        plain, sk, pk = modes["plain"], modes["sk"], modes["pk"]
        out.append({"size": size,
                    "plain_ms": f"{plain.median_ms:.4f}", "sk_ms": f"{sk.median_ms:.4f}",
                    "pk_ms": f"{pk.median_ms:.4f}",
                    "plain_spread_ms": f"{plain.spread_ms:.4f}",
                    "sk_spread_ms": f"{sk.spread_ms:.4f}", "pk_spread_ms": f"{pk.spread_ms:.4f}",
                    "sk_over_plain": f"{sk.median_ms / plain.median_ms:.2f}",
                    "pk_over_sk": f"{pk.median_ms / sk.median_ms:.2f}",
                    "iterations": plain.iterations})
    return out


def cmd_bench_micro(args) -> int:
    config = BenchConfig("micro", args.iterations, args.warmup, args.sizes, args.suite,
                         args.format)
    print(_render(micro_records(bench_micro(config)), MICRO_COLUMNS, args.format))
    return EXIT_OK


def cmd_bench_protocol(args) -> int:
    specs = list_protocols() if args.protocol == "all" else [get_protocol(args.protocol)]
    config = BenchConfig(args.protocol, args.iterations, args.warmup, DEFAULT_SIZES,
                         args.suite, args.format)
    ctx = _context(args)
    records = []
    for spec in specs:
        channel = None
        if args.transport != "loopback":
            channel = open_channel(args.transport, args.endpoint, args.timeout)
        try:
            report = bench_protocol(spec, config, ctx, channel)
        except SoapSecError as exc:
            print(f"{spec.display}: aborted at step {getattr(exc, 'failed_step', None)}: "
                  f"{type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_FAIL
        finally:
            if channel is not None:
                channel.close()
        records.extend(report_records(report))
    print(_render(records, REPORT_COLUMNS, args.format))
    return EXIT_OK


def cmd_serve(args) -> int:
    kind = "tcp" if args.transport == "tcp" else "http"
    srv = serve(kind, args.host, args.port, _context(args), background=False)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    print(f"serving {kind} on {srv.url}", flush=True)
    try:
        srv.serve_forever()
    except (KeyboardInterrupt, SystemExit):
        pass
    finally:
        srv.shutdown()
    return EXIT_OK


def cmd_keygen(args) -> int:
    provider = CryptoProvider(get_suite(args.suite))
    ks = Keystore(provider)
    for spec in list_protocols():
        ks.table_for(spec)
    ks.save(args.output)
    print(f"wrote long-term keys for {len(list_protocols())} protocols to {args.output}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--suite", default="default", choices=sorted(SUITES))
    common.add_argument("--format", default="table", choices=("table", "csv", "json"))
    common.add_argument("--keys", help="keystore JSON written by `keygen`")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--transport", default="loopback",
                     choices=("loopback", "http", "http_post", "tcp"))
    net.add_argument("--endpoint", help="http://host:port/soap or host:port for tcp")
    net.add_argument("--timeout", type=float, default=5.0)

    timing = argparse.ArgumentParser(add_help=False)
    timing.add_argument("--iterations", type=_positive, default=100)
    timing.add_argument("--warmup", type=_non_negative, default=10)

    p = argparse.ArgumentParser(prog="soapsec",
                                description="SOAP security protocol engine and benchmarks")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a name against its pattern")
    s.add_argument("kind", help=", ".join(KINDS))
    s.add_argument("value")
    s.add_argument("--strict", action="store_true", help="use RFC syntax, not the patterns")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("encode", parents=[common], help="print the envelope for a term")
    s.add_argument("term")
    s.add_argument("--symbols", help="symbol file with `ident = kind [literal]` lines")
    s.add_argument("--decl", action="append", help="one symbol declaration; repeatable")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("run", parents=[common, net], help="run one protocol")
    s.add_argument("protocol")
    s.add_argument("--dump-xml", action="store_true", help="print every envelope")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("bench-micro", parents=[common, timing],
                       help="plain vs sk vs pk construction cost")
    s.add_argument("--sizes", type=_sizes, default=DEFAULT_SIZES)
    s.set_defaults(func=cmd_bench_micro)

    s = sub.add_parser("bench-protocol", parents=[common, net, timing],
                       help="per-participant timing report")
    s.add_argument("protocol", nargs="?", default="all")
    s.set_defaults(func=cmd_bench_protocol)

    s = sub.add_parser("serve", parents=[common], help="run a responder endpoint")
    s.add_argument("--transport", default="http", choices=("http", "http_post", "tcp"))
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("list-protocols", parents=[common], help="show builtin protocols")
    s.set_defaults(func=cmd_list)

    s = sub.add_parser("keygen", parents=[common], help="write a shared keystore")
    s.add_argument("output")
    s.set_defaults(func=cmd_keygen)
    return p


def main(argv=None) -> int:
    register_builtin_protocols()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnknownAlgorithm) as exc:
        print(f"soapsec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"soapsec: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SoapSecError, OSError) as exc:
        print(f"soapsec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"soapsec: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
