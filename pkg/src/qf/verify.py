"""Self-check suites run by ``qf verify``.

Each suite compares the active kernels against the scalar references
(and the f16 codec against its defining properties) on seeded random
inputs, stopping at the first mismatch per operator.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qf import halffloat
from qf.kernels import KernelSet, detect_features, use_kernels
from qf.quant import QK, QMatrix, ScaleFormat, block_scales

# relative tolerances from the kernel contracts
NORM_RTOL = 1e-5
DOT_RTOL = 1e-4


@dataclass
class Mismatch:
    operator: str
    seed: int
    case: int
    index: int
    detail: str

    def __str__(self):
        return (f"{self.operator}: seed={self.seed} case={self.case} "
                f"first mismatch at index {self.index} ({self.detail})")


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    mismatches: list[Mismatch] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.mismatches


def _first_diff(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        return min(a.shape[0], b.shape[0])
    idx = np.flatnonzero(a != b)
    return int(idx[0]) if idx.size else -1


def _bits_equal(a: np.ndarray, b: np.ndarray) -> int:
    """-1 if bit-identical, else the first differing index."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.dtype.itemsize == 4:
        return _first_diff(a.view(np.uint32), b.view(np.uint32))
    return _first_diff(a.view(np.uint16), b.view(np.uint16))


def _close(got, want, scale, rtol) -> int:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return min(got.size, want.size)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), want.shape)
    bad = np.flatnonzero(~(np.abs(got - want) <= rtol * scale))
    return int(bad[0]) if bad.size else -1


def _random_row(rng: np.random.Generator, n: int) -> np.ndarray:
    scale = 10.0 ** rng.uniform(-1, 2)
    offset = rng.uniform(-1, 1) * scale
    return (rng.standard_normal(n) * scale + offset).astype(np.float32)


def suite_f16(ks: KernelSet, seed: int, cases: int) -> SuiteResult:
    res = SuiteResult("f16")
    patterns = np.arange(1 << 16, dtype=np.uint16)
    decoded = halffloat.f16_to_f32_row_reference(patterns)
    again = halffloat.f32_to_f16_row_reference(decoded)
    nan = np.isnan(decoded)
    bad = np.flatnonzero((again != patterns) & ~nan)
    if bad.size:
        res.mismatches.append(Mismatch("f16 round trip", seed, 0, int(bad[0]), "encode(decode(b)) != b"))
    if not np.isnan(halffloat.f16_to_f32_row_reference(again[nan])).all():
        res.mismatches.append(Mismatch("f16 round trip", seed, 0, int(np.flatnonzero(nan)[0]), "NaN lost"))
    for name, src in (("f16_to_f32_row", patterns), ("f32_to_f16_row", decoded)):
        k = _bits_equal(ks.reference(name)(src), ks.active(name)(src))
        if k >= 0:
            res.mismatches.append(Mismatch(name, seed, 0, k, "exhaustive sweep"))
    res.cases += 1

    rng = np.random.default_rng(seed)
    done = set()
    for case in range(cases):
        n = int(rng.integers(0, 4097))
        half = rng.integers(0, 1 << 16, n, dtype=np.uint16)
        full = _random_row(rng, n)
        for name, src in (("f16_to_f32_row", half), ("f32_to_f16_row", full)):
            if name in done:
                continue
            k = _bits_equal(ks.reference(name)(src), ks.active(name)(src))
            if k >= 0:
                res.mismatches.append(Mismatch(name, seed, case, k, f"row of {n}"))
                done.add(name)
        res.cases += 1
    return res


def suite_quant(ks: KernelSet, seed: int, cases: int) -> SuiteResult:
    """Round-trip error bound over ``cases`` random blocks per scale format."""
    res = SuiteResult("quant")
    rng = np.random.default_rng(seed)
    quantize = ks.active("quantize_blocks")
    dequantize = ks.active("dequantize_blocks")
    for fmt in ScaleFormat:
        scales = 10.0 ** rng.uniform(-3, 3, (cases, 1))
        x = (rng.standard_normal((cases, QK)) * scales).astype(np.float32)
        blocks = quantize(x, fmt)
        y = dequantize(blocks).astype(np.float64)
        d = block_scales(blocks).astype(np.float64)[:, None]
        ulp = np.spacing(np.abs(y).astype(np.float32)).astype(np.float64)
        err = np.abs(x.astype(np.float64) - y)
        bad = np.flatnonzero((err > d / 2 + ulp).any(axis=1))
        if bad.size:
            res.mismatches.append(Mismatch(f"quantize_blocks[{fmt.value}]", seed, int(bad[0]), int(np.argmax(err[bad[0]] - d[bad[0]] / 2)),
                                           "round-trip error above scale/2 + 1 ulp"))
        if (np.abs(blocks["qs"]) > 127).any() or (blocks["qs"] == -128).any():
            res.mismatches.append(Mismatch(f"quantize_blocks[{fmt.value}]", seed, 0, 0, "quant outside [-127, 127]"))
        k = _first_diff(np.frombuffer(ks.reference("quantize_blocks")(x, fmt).tobytes(), np.uint8),
                        np.frombuffer(blocks.tobytes(), np.uint8))
        if k >= 0:
            res.mismatches.append(Mismatch(f"quantize_blocks[{fmt.value}]", seed, k // fmt.block_bytes,
                                           k // fmt.block_bytes, "active blocks differ from reference"))
        k = _bits_equal(ks.reference("dequantize_blocks")(blocks), dequantize(blocks))
        if k >= 0:
            res.mismatches.append(Mismatch(f"dequantize_blocks[{fmt.value}]", seed, k // QK, k,
                                           "active values differ from reference"))
        res.cases += cases
    return res


def suite_kernels(ks: KernelSet, seed: int, cases: int) -> SuiteResult:
    res = SuiteResult("kernels")
    rng = np.random.default_rng(seed)
    failed: set[str] = set()

    def check(name, case, k, detail):
        if k >= 0 and name not in failed:
            failed.add(name)
            res.mismatches.append(Mismatch(name, seed, case, k, detail))

    quantize = ks.reference("quantize_blocks")
    for case in range(cases):
        n = int(rng.integers(1, 1025)) if case % 16 else int(rng.integers(1, 4097))
        x = _random_row(rng, n)
        for name in ("norm_f32", "rms_norm_f32"):
            want = ks.reference(name)(x, 1e-5)
            got = ks.active(name)(x, 1e-5)
            check(name, case, _close(got, want, np.max(np.abs(want)), NORM_RTOL), f"row of {n}")

        fmt = ScaleFormat.F16S if case % 2 else ScaleFormat.F32S
        nb = int(rng.integers(1, 33))
        a = quantize(_random_row(rng, nb * QK).reshape(-1, QK), fmt)
        b = quantize(_random_row(rng, nb * QK).reshape(-1, QK), fmt)
        check("dot_partials_q8", case,
              _first_diff(ks.active("dot_partials_q8")(a, b), ks.reference("dot_partials_q8")(a, b)),
              f"{nb} blocks, {fmt.value}")
        terms = np.abs(block_scales(a).astype(np.float64) * block_scales(b)
                       * ks.reference("dot_partials_q8")(a, b)).sum()
        check("vec_dot_q8", case,
              _close(ks.active("vec_dot_q8")(a, b), ks.reference("vec_dot_q8")(a, b), terms, DOT_RTOL),
              f"{nb} blocks, {fmt.value}")

        # a larger matrix every 50th case
        rows = int(rng.integers(1, 33)) if case % 50 else int(rng.integers(1, 257))
        cols = QK * (int(rng.integers(1, 9)) if case % 50 else int(rng.integers(1, 129)))
        w = QMatrix.from_float(rng.standard_normal((rows, cols)).astype(np.float32), fmt)
        xs = rng.standard_normal((int(rng.integers(1, 5)), cols)).astype(np.float32)
        mag = np.abs(w.dequantize()).astype(np.float64) @ np.abs(xs[0]).astype(np.float64)
        mag = np.maximum(mag, np.finfo(np.float32).tiny)
        check("matvec_q8", case,
              _close(ks.active("matvec_q8")(w, xs[0]), ks.reference("matvec_q8")(w, xs[0]), mag, DOT_RTOL),
              f"{rows}x{cols}, {fmt.value}")
        batch = ks.active("matmul_q8")(w, xs)
        scale = np.abs(w.dequantize()).astype(np.float64) @ np.abs(xs.T).astype(np.float64)
        check("matmul_q8", case,
              _close(batch, ks.reference("matmul_q8")(w, xs), np.maximum(scale.T, np.finfo(np.float32).tiny), DOT_RTOL),
              f"{xs.shape[0]}x{rows}x{cols}, {fmt.value}")
        per_row = np.stack([ks.active("matvec_q8")(w, r) for r in xs])
        check("matmul_q8 rows", case, _bits_equal(batch, per_row), "batch row != matvec of that row")
        res.cases += 1
    return res


SUITES: dict[str, Callable[[KernelSet, int, int], SuiteResult]] = {
    "f16": suite_f16,
    "quant": suite_quant,
    "kernels": suite_kernels,
}

DEFAULT_CASES = {"f16": 10_000, "quant": 100_000, "kernels": 10_000}


def inject_fault(ks: KernelSet, name: str) -> KernelSet:
    """Rebind ``name`` to a copy that corrupts one output element."""
    if name not in ks.bindings:
        raise ValueError(f"unknown kernel {name!r}; choose from {', '.join(ks.names)}")
    impl = ks.active(name)

    def faulty(*args):
        out = impl(*args)
        if isinstance(out, np.ndarray) and out.size:
            out = out.copy()
            flat = out.reshape(-1)
            if flat.dtype.names:
                flat["qs"][0, 0] = ~flat["qs"][0, 0] | 1
            else:
                flat[flat.size // 2] += 1
            return out
        if isinstance(out, np.ndarray):
            return out
        return out + 1.0

    return ks.with_active(name, faulty, "fault")


def run_suites(names=None, ks: KernelSet | None = None, seed: int = 0,
               cases: dict[str, int] | None = None) -> list[SuiteResult]:
    ks = ks or detect_features()
    fault = os.environ.get("QF_INJECT_FAULT")
    if fault:
        ks = inject_fault(ks, fault)
    counts = dict(DEFAULT_CASES, **(cases or {}))
    results = []
    with use_kernels(ks):
        for name in names or SUITES:
            t0 = time.perf_counter()
            r = SUITES[name](ks, seed, counts[name])
            r.seconds = time.perf_counter() - t0
            results.append(r)
    return results
