"""Public compute operators, routed through the active :class:`KernelSet`."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from qf.kernels.dispatch import get_kernels, worker_threads
from qf.quant import QK, QMatrix, scale_format_of


@dataclass(frozen=True)
class NormConfig:
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


DEFAULT_NORM = NormConfig()


def _row(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D row, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("cannot normalize an empty row")
    return x


def norm_f32(x, cfg: NormConfig = DEFAULT_NORM) -> np.ndarray:
    """Layer norm without affine terms: ``(x - mean) / sqrt(var + eps)``.

    The variance is the population (divide-by-n) variance.
    """
    return get_kernels().active("norm_f32")(_row(x), cfg.eps)


def rms_norm_f32(x, cfg: NormConfig = DEFAULT_NORM) -> np.ndarray:
    return get_kernels().active("rms_norm_f32")(_row(x), cfg.eps)


def _check_pair(a: np.ndarray, b: np.ndarray, n_blocks: int | None):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if n_blocks is not None:
        if n_blocks > min(a.shape[0], b.shape[0]):
            raise ValueError(f"{n_blocks} blocks requested, operands hold {a.shape[0]} and {b.shape[0]}")
        a, b = a[:n_blocks], b[:n_blocks]
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"block count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if scale_format_of(a) is not scale_format_of(b):
        raise ValueError("operands use different scale formats")
    return a, b


def vec_dot_q8(a, b, n_blocks: int | None = None) -> float:
    """Dot product of two Q8 block rows.

    Each block contributes ``d_a * d_b * sum(qa * qb)`` with the 32-term
    integer sum computed exactly in int32.
    """
    a, b = _check_pair(a, b, n_blocks)
    return float(get_kernels().active("vec_dot_q8")(a, b))


def dot_partials_q8(a, b, n_blocks: int | None = None) -> np.ndarray:
    """Per-block integer sums of ``qa * qb`` (debug view of vec_dot_q8)."""
    a, b = _check_pair(a, b, n_blocks)
    return get_kernels().active("dot_partials_q8")(a, b)


def matvec_q8(w: QMatrix, x) -> np.ndarray:
    """``W @ x`` with ``x`` quantized once to blocks in ``W``'s scale format."""
    rows, cols = w.shape
    x = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    if x.shape[0] != cols:
        raise ValueError(f"matrix has {cols} columns, vector has {x.shape[0]} elements")
    return get_kernels().active("matvec_q8")(w, x)


def matmul_q8(w: QMatrix, xs, threads: int | None = None) -> np.ndarray:
    """Batched ``X @ W.T``; row ``i`` equals ``matvec_q8(W, X[i])`` exactly.

    Batch rows are split across up to ``threads`` workers (capped by
    ``QF_THREADS``); the split never changes a row's result.
    """
    rows, cols = w.shape
    xs = np.ascontiguousarray(xs, dtype=np.float32)
    if xs.ndim != 2 or xs.shape[1] != cols:
        raise ValueError(f"expected a batch of shape (m, {cols}), got {xs.shape}")
    if cols % QK:
        raise ValueError(f"inner dimension {cols} not divisible by {QK}")
    binding = get_kernels()["matmul_q8"]
    impl = binding.active
    n = min(worker_threads(threads), xs.shape[0])
    if n <= 1:
        return impl(w, xs)
    if binding.vectorized:
        w.panel()  # build once, not racily per worker
    chunks = np.array_split(np.arange(xs.shape[0]), n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(lambda idx: impl(w, xs[idx]), chunks))
    return np.concatenate(parts, axis=0)
