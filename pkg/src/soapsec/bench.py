"""Benchmarks: envelope construction cost and per-protocol timing reports.

Micro benchmarks time construct + encrypt + serialize for a single user
data payload ``M`` in three shapes: ``M`` in the clear, ``{M}sk(Kab)`` and
``{M}pk(PKb)``.  Each iteration uses a fresh payload so no cache can
short-circuit the work.  Protocol benchmarks run a protocol repeatedly and
report per-cell medians.
"""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional

from .crypto import CryptoProvider, get_suite
from .engine import EngineContext, Keystore, ProtocolSpec, TimingReport, median_report, \
    run_protocol
from .envelope import KeyContext, build_envelope
from .errors import ConfigError
from .terms import Data, Enc, FuncName, KeyMaterial, KeyTerm, UserData

DEFAULT_SIZES = (256, 1024, 4096, 16384)
MODES = ("plain", "sk", "pk")


@dataclass(frozen=True)
class BenchConfig:
    target: str = "micro"
    iterations: int = 100
    warmup: int = 10
    sizes: tuple = DEFAULT_SIZES
    suite: str = "default"
    output_format: str = "table"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.warmup < 0:
            raise ConfigError("warmup must not be negative")
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ConfigError("payload sizes must be positive")
        if self.output_format not in ("table", "csv", "json"):
            raise ConfigError(f"unknown output format {self.output_format!r}")
        get_suite(self.suite)


@dataclass(frozen=True)
class MicroRow:
    mode: str
    size: int
    median_ms: float
    min_ms: float
    max_ms: float
    iterations: int

    @property
    def spread_ms(self) -> float:
        return self.max_ms - self.min_ms


def pin_to_one_cpu():
    """Keep measurement loops on a single core where the OS allows it."""
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
    except (AttributeError, OSError):
        pass


@dataclass
class MicroBench:
    provider: CryptoProvider
    ctx: KeyContext = field(init=False)

    def __post_init__(self):
        p = self.provider
        pair = p.generate_keypair()
        self.ctx = KeyContext(p, {
            "Kab": KeyTerm(p.generate_sk_key("Kab")),
            "PKb": KeyTerm(KeyMaterial(pair.public_part, "base64Binary", "PKb")),
            "SKb": KeyTerm(KeyMaterial(pair.private_part, "base64Binary", "SKb")),
        }, {"PKb": "SKb", "SKb": "PKb"})

    def term(self, mode: str, payload: bytes):
        m = Data(UserData(payload))
        if mode == "plain":
            return m
        if mode == "sk":
            return Enc(m, FuncName.SK, self.ctx.keys["Kab"])
        if mode == "pk":
            return Enc(m, FuncName.PK, self.ctx.keys["PKb"])
        raise ConfigError(f"unknown micro benchmark mode {mode!r}")

    def once(self, mode: str, size: int) -> float:
        t = self.term(mode, os.urandom(size))
        t0 = time.perf_counter_ns()
        build_envelope(t, self.ctx).to_bytes()
        return (time.perf_counter_ns() - t0) / 1e6

    def measure(self, mode: str, size: int, iterations: int, warmup: int) -> MicroRow:
        for _ in range(warmup):
            self.once(mode, size)
        samples = [self.once(mode, size) for _ in range(iterations)]
        return MicroRow(mode, size, statistics.median(samples), min(samples), max(samples),
                        iterations)


def bench_micro(config: BenchConfig, modes=MODES,
                provider: Optional[CryptoProvider] = None) -> list:
    """One row per (mode, size), modes interleaved per size."""
    pin_to_one_cpu()
    bench = MicroBench(provider or CryptoProvider(get_suite(config.suite)))
    rows = []
    for size in config.sizes:
        for mode in modes:
            rows.append(bench.measure(mode, size, config.iterations, config.warmup))
    return rows


def bench_protocol(spec: ProtocolSpec, config: BenchConfig,
                   ctx: Optional[EngineContext] = None, channel=None) -> TimingReport:
    """Per-participant report for ``spec`` with the median of each cell."""
    pin_to_one_cpu()
    if ctx is None:
        provider = CryptoProvider(get_suite(config.suite))
        ctx = EngineContext(provider, Keystore(provider))
    for _ in range(config.warmup):
        run_protocol(spec, channel, ctx)
    runs = [run_protocol(spec, channel, ctx).cells() for _ in range(config.iterations)]
    return median_report(spec, runs)


__all__ = ["BenchConfig", "MicroRow", "MicroBench", "bench_micro", "bench_protocol",
           "DEFAULT_SIZES", "MODES", "pin_to_one_cpu"]
