"""Scalar reference kernels.

Plain element-at-a-time loops compiled with numba. These define the
accumulation order every other implementation is checked against:
block-major, left to right. Kernels taking binary16 scales decode them
inline and return how many decodes they did.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from qf.halffloat import _half_to_float_bits
from qf.quant import (
    BLOCK_Q8_F16S,
    QMatrix,
    ScaleFormat,
    _record_decodes,
    quantize_blocks_reference,
    scale_format_of,
)

_NO_BITS = np.zeros(0, dtype=np.uint16)
_NO_F32 = np.zeros(0, dtype=np.float32)


@njit(cache=True, nogil=True)
def _norm_ref(x, eps):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += np.float64(x[i])
    mean = np.float32(s / n)
    y = np.empty(n, dtype=np.float32)
    s2 = 0.0
    for i in range(n):
        v = x[i] - mean
        y[i] = v
        s2 += np.float64(v * v)
    variance = np.float32(s2 / n)
    scale = np.float32(1.0) / np.sqrt(variance + eps)
    for i in range(n):
        y[i] = y[i] * scale
    return y


@njit(cache=True, nogil=True)
def _rms_norm_ref(x, eps):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += np.float64(x[i] * x[i])
    mean = np.float32(s / n)
    scale = np.float32(1.0) / np.sqrt(mean + eps)
    y = np.empty(n, dtype=np.float32)
    for i in range(n):
        y[i] = x[i] * scale
    return y


@njit(cache=True, nogil=True)
def _scale(d, bits, k, half):
    if half:
        return np.uint32(_half_to_float_bits(bits[k])).view(np.float32)
    return d[k]


@njit(cache=True, nogil=True)
def _block_isum(qa, qb):
    s = np.int32(0)
    for i in range(32):
        s += np.int32(qa[i]) * np.int32(qb[i])
    return s


@njit(cache=True, nogil=True)
def _dot_partials_ref(qa, qb):
    nb = qa.shape[0]
    out = np.empty(nb, dtype=np.int32)
    for k in range(nb):
        out[k] = _block_isum(qa[k], qb[k])
    return out


@njit(cache=True, nogil=True)
def _vec_dot_ref(da, ba, qa, db, bb, qb, half):
    acc = np.float32(0.0)
    decodes = 0
    for k in range(qa.shape[0]):
        sa = _scale(da, ba, k, half)
        sb = _scale(db, bb, k, half)
        if half:
            decodes += 2
        acc += (sa * sb) * np.float32(_block_isum(qa[k], qb[k]))
    return acc, decodes


@njit(cache=True, nogil=True)
def _matvec_ref(dw, bw, qw, dx, bx, qx, half):
    rows = qw.shape[0]
    out = np.empty(rows, dtype=np.float32)
    decodes = 0
    for r in range(rows):
        acc, n = _vec_dot_ref(dw[r], bw[r], qw[r], dx, bx, qx, half)
        out[r] = acc
        decodes += n
    return out, decodes


def _split(blocks: np.ndarray):
    """Return (f32 scales, binary16 scale bits, quants) for the njit kernels."""
    qs = np.ascontiguousarray(blocks["qs"])
    if blocks.dtype == BLOCK_Q8_F16S:
        bits = np.ascontiguousarray(blocks["d"])
        return np.zeros(bits.shape[:-1] + (0,), np.float32), bits, qs, True
    scale_format_of(blocks)
    d = np.ascontiguousarray(blocks["d"])
    return d, np.zeros(d.shape[:-1] + (0,), np.uint16), qs, False


def norm_f32(x: np.ndarray, eps: float) -> np.ndarray:
    return _norm_ref(x, np.float32(eps))


def rms_norm_f32(x: np.ndarray, eps: float) -> np.ndarray:
    return _rms_norm_ref(x, np.float32(eps))


def dot_partials_q8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _dot_partials_ref(np.ascontiguousarray(a["qs"]), np.ascontiguousarray(b["qs"]))


def vec_dot_q8(a: np.ndarray, b: np.ndarray) -> float:
    da, ba, qa, half = _split(a)
    db, bb, qb, _ = _split(b)
    acc, decodes = _vec_dot_ref(da, ba, qa, db, bb, qb, half)
    _record_decodes(decodes)
    return acc


def matvec_q8(w: QMatrix, x: np.ndarray) -> np.ndarray:
    fmt = w.scale_format
    xq = quantize_blocks_reference(x.reshape(-1, 32), fmt)
    dw, bw, qw, half = _split(w.blocks)
    dx, bx, qx, _ = _split(xq)
    out, decodes = _matvec_ref(dw, bw, qw, dx, bx, qx, fmt is ScaleFormat.F16S)
    _record_decodes(decodes)
    return out


def matmul_q8(w: QMatrix, xs: np.ndarray) -> np.ndarray:
    out = np.empty((xs.shape[0], w.shape[0]), dtype=np.float32)
    for i in range(xs.shape[0]):
        out[i] = matvec_q8(w, xs[i])
    return out
