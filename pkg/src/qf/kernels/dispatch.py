from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

from qf import halffloat, quant
from qf.kernels import reference, vectorized

# checked in order; the first one the host reports becomes the feature tag
SIMD_FEATURES = ("AVX512F", "AVX2", "AVX", "SSE2", "ASIMD", "NEON", "VSX", "VX")

_TRUTHY = {"1", "true", "yes", "on"}


@dataclass(frozen=True)
class KernelBinding:
    name: str
    reference: Callable
    active: Callable
    feature_tag: str

    @property
    def vectorized(self) -> bool:
        return self.active is not self.reference


@dataclass(frozen=True)
class KernelSet:
    bindings: Mapping[str, KernelBinding] = field(default_factory=dict)

    def __getitem__(self, name: str) -> KernelBinding:
        return self.bindings[name]

    def active(self, name: str) -> Callable:
        return self.bindings[name].active

    def reference(self, name: str) -> Callable:
        return self.bindings[name].reference

    @property
    def names(self) -> list[str]:
        return list(self.bindings)

    @property
    def dispatch(self) -> str:
        tags = {b.feature_tag for b in self.bindings.values() if b.vectorized}
        return "vectorized" if tags else "scalar"

    def summary(self) -> str:
        return "\n".join(
            f"{b.name:<18} {'vectorized' if b.vectorized else 'scalar':<10} {b.feature_tag}"
            for b in self.bindings.values()
        )

    def scalar_only(self) -> "KernelSet":
        return KernelSet({
            k: replace(b, active=b.reference, feature_tag="scalar")
            for k, b in self.bindings.items()
        })

    def with_active(self, name: str, impl: Callable, feature_tag: str = "override") -> "KernelSet":
        """Copy with one operator rebound (fault injection, experiments)."""
        bindings = dict(self.bindings)
        bindings[name] = replace(bindings[name], active=impl, feature_tag=feature_tag)
        return KernelSet(bindings)


_IMPLS: dict[str, tuple[Callable, Callable]] = {
    "f16_to_f32_row": (halffloat.f16_to_f32_row_reference, halffloat.f16_to_f32_row_vectorized),
    "f32_to_f16_row": (halffloat.f32_to_f16_row_reference, halffloat.f32_to_f16_row_vectorized),
    "quantize_blocks": (quant.quantize_blocks_reference, quant.quantize_blocks_vectorized),
    "dequantize_blocks": (quant.dequantize_blocks_reference, quant.dequantize_blocks_vectorized),
    "norm_f32": (reference.norm_f32, vectorized.norm_f32),
    "rms_norm_f32": (reference.rms_norm_f32, vectorized.rms_norm_f32),
    "dot_partials_q8": (reference.dot_partials_q8, vectorized.dot_partials_q8),
    "vec_dot_q8": (reference.vec_dot_q8, vectorized.vec_dot_q8),
    "matvec_q8": (reference.matvec_q8, vectorized.matvec_q8),
    "matmul_q8": (reference.matmul_q8, vectorized.matmul_q8),
}


def host_simd_features() -> list[str]:
    """SIMD extensions numpy detected on this CPU, widest first."""
    try:
        from numpy._core._multiarray_umath import __cpu_features__
    except ImportError:  # numpy < 2
        try:
            from numpy.core._multiarray_umath import __cpu_features__
        except ImportError:
            return []
    return [f for f in SIMD_FEATURES if __cpu_features__.get(f)]


def force_scalar_requested() -> bool:
    return os.environ.get("QF_FORCE_SCALAR", "").strip().lower() in _TRUTHY


def detect_features(override: str | None = None) -> KernelSet:
    """Probe the host and bind each operator.

    ``override="scalar"`` (or ``QF_FORCE_SCALAR=1`` in the environment)
    binds every operator to its scalar reference.
    """
    if override not in (None, "scalar", "auto"):
        raise ValueError(f"unknown dispatch override {override!r}")
    simd = host_simd_features()
    scalar = override == "scalar" or (override is None and force_scalar_requested())
    bindings = {}
    for name, (ref, vec) in _IMPLS.items():
        if simd and not scalar:
            bindings[name] = KernelBinding(name, ref, vec, simd[0])
        else:
            bindings[name] = KernelBinding(name, ref, ref, "scalar")
    return KernelSet(bindings)


_current: KernelSet | None = None


def get_kernels() -> KernelSet:
    global _current
    if _current is None:
        _current = detect_features()
    return _current


def set_kernels(ks: KernelSet | None) -> None:
    global _current
    _current = ks


@contextlib.contextmanager
def use_kernels(ks: KernelSet):
    """Temporarily make ``ks`` the process-wide kernel set."""
    global _current
    saved = _current
    _current = ks
    try:
        yield ks
    finally:
        _current = saved


def worker_threads(requested: int | None = None) -> int:
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("QF_THREADS")
    if cap:
        n = min(n, int(cap))
    return max(1, n)

