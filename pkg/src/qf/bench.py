"""Prefill/decode throughput harness and kernel micro-timings.

Rates are medians over ``repeat_count`` timed runs after ``warmup_iters``
untimed ones. Every metric is written to CSV as one row per run plus a
``median`` summary row.
"""
from __future__ import annotations

import csv
import hashlib
import io
import os
import resource
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import psutil

from qf import halffloat
from qf.kernels import KernelSet, detect_features, use_kernels
from qf.pipeline import build_model, decode_loop, prefill, synthetic_weights
from qf.quant import QK, ScaleFormat, TensorFormat, container_bytes, quantize_blocks_vectorized

CSV_COLUMNS = ("run_id", "metric", "value", "unit", "scale_format", "dispatch", "threads", "seed")
MIB = 1024 * 1024


@dataclass
class BenchConfig:
    hidden_dim: int = 512
    ffn_dim: int = 1024
    n_layers: int = 8
    prefill_tokens: int = 64
    decode_steps: int = 64
    warmup_iters: int = 1
    repeat_count: int = 5
    scale_format: ScaleFormat = ScaleFormat.F16S
    threads: int = 1
    seed: int = 0
    force_scalar: bool = False

    def __post_init__(self):
        self.scale_format = ScaleFormat(self.scale_format)
        counts = ("hidden_dim", "ffn_dim", "n_layers", "prefill_tokens", "decode_steps",
                  "repeat_count", "threads")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        for name in ("hidden_dim", "ffn_dim"):
            if getattr(self, name) % QK:
                raise ValueError(f"{name} must be a multiple of {QK}, got {getattr(self, name)}")


@dataclass
class KernelTiming:
    name: str
    reference_ns: list[float] = field(default_factory=list)
    active_ns: list[float] = field(default_factory=list)

    @property
    def speedup(self) -> list[float]:
        return [r / a for r, a in zip(self.reference_ns, self.active_ns)]


@dataclass
class BenchReport:
    config: BenchConfig
    dispatch: str
    dispatch_summary: str
    prefill_rates: list[float]
    decode_rates: list[float]
    kernels: list[KernelTiming]
    resident_bytes: int
    peak_resident_bytes: int
    resident_samples: list[int]
    container_bytes: dict[str, int]
    output_digest: str
    flags: list[str] = field(default_factory=list)

    @property
    def prefill_rate(self) -> float:
        return statistics.median(self.prefill_rates)

    @property
    def decode_rate(self) -> float:
        return statistics.median(self.decode_rates)

    def computed_outputs(self) -> dict:
        """Everything the run computed except timings and memory readings."""
        return {
            "config": asdict(self.config),
            "dispatch": self.dispatch,
            "container_bytes": dict(self.container_bytes),
            "output_digest": self.output_digest,
        }

    def metrics(self) -> list[tuple[str, str, list[float]]]:
        rows = [
            ("prefill_rate", "tokens/s", self.prefill_rates),
            ("decode_rate", "tokens/s", self.decode_rates),
            ("resident_memory", "MiB", [b / MIB for b in self.resident_samples]),
        ]
        for k in self.kernels:
            rows.append((f"kernel.{k.name}.reference", "ns/op", k.reference_ns))
            rows.append((f"kernel.{k.name}.active", "ns/op", k.active_ns))
            rows.append((f"kernel.{k.name}.speedup", "x", k.speedup))
        n = len(self.prefill_rates)
        for fmt, nbytes in self.container_bytes.items():
            rows.append((f"container_bytes.{fmt}", "bytes", [float(nbytes)] * n))
        return rows

    def write_csv(self, f) -> None:
        cfg = self.config
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        common = (cfg.scale_format.value, self.dispatch, cfg.threads, cfg.seed)
        for metric, unit, values in self.metrics():
            for i, v in enumerate(values):
                w.writerow((i, metric, _fmt(v), unit, *common))
            w.writerow(("median", metric, _fmt(statistics.median(values)), unit, *common))

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def to_text(self) -> str:
        cfg = self.config
        lines = [
            f"model      hidden={cfg.hidden_dim} ffn={cfg.ffn_dim} layers={cfg.n_layers} "
            f"scale={cfg.scale_format.value} seed={cfg.seed}",
            f"dispatch   {self.dispatch}  threads={cfg.threads}",
            f"prefill    {self.prefill_rate:10.2f} tokens/s  "
            f"(min {min(self.prefill_rates):.2f}, max {max(self.prefill_rates):.2f}, "
            f"{cfg.prefill_tokens} tokens)",
            f"decode     {self.decode_rate:10.2f} tokens/s  "
            f"(min {min(self.decode_rates):.2f}, max {max(self.decode_rates):.2f}, "
            f"{cfg.decode_steps} steps)",
            f"memory     {self.resident_bytes / MIB:.1f} MiB resident after load, "
            f"{self.peak_resident_bytes / MIB:.1f} MiB peak",
            "",
            f"{'kernel':<18}{'scalar ns/op':>14}{'active ns/op':>14}{'speedup':>9}",
        ]
        for k in self.kernels:
            ref = statistics.median(k.reference_ns)
            act = statistics.median(k.active_ns)
            lines.append(f"{k.name:<18}{ref:>14.0f}{act:>14.0f}{ref / act:>8.2f}x")
        lines.append("")
        lines.append("weights container bytes")
        base = self.container_bytes[TensorFormat.F32.name]
        for fmt, nbytes in self.container_bytes.items():
            lines.append(f"  {fmt:<8}{nbytes:>14,d}  ({nbytes / base:.4f} of F32)")
        ratio = self.container_bytes["Q8_F32S"] / self.container_bytes["Q8_F16S"]
        lines.append(f"  Q8_F32S / Q8_F16S = {ratio:.6f} (+{(ratio - 1) * 100:.2f}%)")
        for flag in self.flags:
            lines.append(f"FLAG {flag}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return repr(float(v))


def _rss() -> int:
    return psutil.Process().memory_info().rss


def _peak_rss() -> int:
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # ru_maxrss is KiB on Linux, bytes on macOS
    return peak if sys.platform == "darwin" else peak * 1024


def _time_ns(fn, min_seconds: float = 0.002) -> float:
    fn()
    n = 1
    while True:
        t0 = time.perf_counter_ns()
        for _ in range(n):
            fn()
        elapsed = time.perf_counter_ns() - t0
        if elapsed >= min_seconds * 1e9 or n >= 1 << 20:
            return elapsed / n
        n *= 2


def _kernel_cases(cfg: BenchConfig, rng: np.random.Generator, model):
    fmt = cfg.scale_format
    row = rng.standard_normal(4096).astype(np.float32)
    half = halffloat.f32_to_f16_row_vectorized(row)
    h = rng.standard_normal(cfg.hidden_dim).astype(np.float32)
    a = quantize_blocks_vectorized(h.reshape(-1, QK), fmt)
    b = quantize_blocks_vectorized(rng.standard_normal(cfg.hidden_dim).astype(np.float32).reshape(-1, QK), fmt)
    w_up = model.layers[0].w_up
    return [
        ("f16_to_f32_row", (half, None)),
        ("f32_to_f16_row", (row, None)),
        ("norm_f32", (h, 1e-5)),
        ("rms_norm_f32", (h, 1e-5)),
        ("vec_dot_q8", (a, b)),
        ("matvec_q8", (w_up, h)),
    ]


def _kernel_set(cfg: BenchConfig, kernels: KernelSet | None) -> KernelSet:
    ks = kernels or detect_features("scalar" if cfg.force_scalar else None)
    return ks.scalar_only() if cfg.force_scalar else ks


class _Session:
    """One configuration's model, inputs and samples."""

    def __init__(self, cfg: BenchConfig, ks: KernelSet):
        self.cfg, self.ks = cfg, ks
        weights = synthetic_weights(cfg.hidden_dim, cfg.ffn_dim, cfg.n_layers, cfg.seed)
        self.model = build_model(weights, cfg.scale_format)
        n_weights = sum(up.size + down.size for up, down in weights)
        self.sizes = {f.name: container_bytes(n_weights, f) for f in TensorFormat}
        rng = np.random.default_rng(cfg.seed + 1)
        self.xs = rng.standard_normal((cfg.prefill_tokens, cfg.hidden_dim)).astype(np.float32)
        self.x0 = rng.standard_normal(cfg.hidden_dim).astype(np.float32)
        self.prefill_rates, self.decode_rates, self.rss_samples, self.digests = [], [], [], []
        self.resident = 0

    def warmup(self) -> None:
        with use_kernels(self.ks):
            for _ in range(self.cfg.warmup_iters):
                prefill(self.model, self.xs, self.cfg.threads)
                decode_loop(self.model, self.x0, self.cfg.decode_steps)
        self.resident = _rss()

    def repeat(self) -> None:
        cfg = self.cfg
        with use_kernels(self.ks):
            out, elapsed = prefill(self.model, self.xs, cfg.threads)
            self.prefill_rates.append(cfg.prefill_tokens / elapsed)
            final, step_times = decode_loop(self.model, self.x0, cfg.decode_steps)
            self.decode_rates.append(cfg.decode_steps / sum(step_times))
        self.rss_samples.append(_rss())
        digest = hashlib.sha256()
        for layer in self.model.layers:
            digest.update(layer.w_up.blocks.tobytes())
            digest.update(layer.w_down.blocks.tobytes())
        digest.update(out.tobytes())
        digest.update(final.tobytes())
        self.digests.append(digest.hexdigest())

    def finish(self) -> BenchReport:
        cfg, ks = self.cfg, self.ks
        timings = []
        kernel_rng = np.random.default_rng(cfg.seed + 2)
        with use_kernels(ks):
            for name, args in _kernel_cases(cfg, kernel_rng, self.model):
                t = KernelTiming(name)
                ref, act = ks.reference(name), ks.active(name)
                for _ in range(cfg.repeat_count):
                    t.reference_ns.append(_time_ns(lambda: ref(*args)))
                    t.active_ns.append(_time_ns(lambda: act(*args)))
                timings.append(t)

        report = BenchReport(
            config=cfg,
            dispatch=_dispatch_label(ks),
            dispatch_summary=ks.summary(),
            prefill_rates=self.prefill_rates,
            decode_rates=self.decode_rates,
            kernels=timings,
            resident_bytes=self.resident,
            peak_resident_bytes=_peak_rss(),
            resident_samples=self.rss_samples,
            container_bytes=self.sizes,
            output_digest=self.digests[0],
        )
        if len(set(self.digests)) != 1:
            report.flags.append("outputs differ between repeats")
        if cfg.prefill_tokens > 1 and report.prefill_rate < report.decode_rate:
            report.flags.append(
                f"prefill rate {report.prefill_rate:.2f} below decode rate {report.decode_rate:.2f}"
            )
        return report


def run_bench(cfg: BenchConfig, kernels: KernelSet | None = None) -> BenchReport:
    return run_interleaved([cfg], kernels)[0]


def run_interleaved(cfgs: list[BenchConfig], kernels: KernelSet | None = None) -> list[BenchReport]:
    """Bench several configurations with their timed repeats alternated.

    Host speed drifts over tens of seconds; alternating repeats exposes
    every configuration to the same drift, so their rates compare fairly.
    All models stay loaded together, so resident memory readings include
    the other configurations' weights.
    """
    sessions = [_Session(c, _kernel_set(c, kernels)) for c in cfgs]
    for s in sessions:
        s.warmup()
    for i in range(max(c.repeat_count for c in cfgs)):
        for s in sessions:
            if i < s.cfg.repeat_count:
                s.repeat()
    return [s.finish() for s in sessions]


def _dispatch_label(ks: KernelSet) -> str:
    tags = sorted({b.feature_tag for b in ks.bindings.values() if b.vectorized})
    return "vectorized:" + "+".join(tags) if tags else "scalar"


def compare_runs(vectorized: BenchReport, scalar: BenchReport,
                 f32s: BenchReport, f16s: BenchReport) -> list[str]:
    """Flags for throughput running against the expected direction."""
    flags = []
    if vectorized.decode_rate < scalar.decode_rate:
        flags.append(
            f"vectorized decode {vectorized.decode_rate:.2f} below scalar {scalar.decode_rate:.2f} tokens/s"
        )
    if f32s.decode_rate < f16s.decode_rate:
        flags.append(
            f"Q8_F32S decode {f32s.decode_rate:.2f} below Q8_F16S {f16s.decode_rate:.2f} tokens/s"
        )
    return flags


def env_threads_default() -> int:
    cap = os.environ.get("QF_THREADS")
    return int(cap) if cap else 1
