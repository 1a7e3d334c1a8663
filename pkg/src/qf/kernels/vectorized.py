"""Vectorized kernels.

Row kernels are compiled loops that let the compiler reassociate float
sums, which is what allows reductions to run in SIMD lanes; results
therefore differ from the scalar references by reordering error only.

Matrix kernels run the integer block sums through a float32 matmul over
the widened quants: every product is at most 127**2 and every block sum
at most 32 * 127**2 < 2**24, so the float32 results are exact integers
whatever order the BLAS picks. The scale-weighted outer sum then runs in
the reference's block order, which keeps matvec and matmul bit-identical
to the scalar path.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from qf.quant import (
    BLOCK_Q8_F16S,
    QMatrix,
    _record_decodes,
    block_scales,
    quantize_blocks_vectorized,
)

_REASSOC = {"reassoc", "nsz", "contract"}


@njit(cache=True, nogil=True, fastmath=_REASSOC)
def _norm(x, eps):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += np.float64(x[i])
    mean = np.float32(s / n)
    s2 = 0.0
    for i in range(n):
        v = x[i] - mean
        s2 += np.float64(v * v)
    scale = np.float32(1.0) / np.sqrt(np.float32(s2 / n) + eps)
    y = np.empty(n, dtype=np.float32)
    for i in range(n):
        y[i] = (x[i] - mean) * scale
    return y


@njit(cache=True, nogil=True, fastmath=_REASSOC)
def _rms_norm(x, eps):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += np.float64(x[i] * x[i])
    scale = np.float32(1.0) / np.sqrt(np.float32(s / n) + eps)
    y = np.empty(n, dtype=np.float32)
    for i in range(n):
        y[i] = x[i] * scale
    return y


@njit(cache=True, nogil=True)
def _partials(qa, qb):
    nb = qa.shape[0]
    out = np.empty(nb, dtype=np.int32)
    for k in range(nb):
        s = np.int32(0)
        for i in range(32):
            s += np.int32(qa[k, i]) * np.int32(qb[k, i])
        out[k] = s
    return out


@njit(cache=True, nogil=True)
def _half_scale(h):
    # branch-free binary16 -> float32 for normal/subnormal/zero scales
    h = np.uint32(h)
    exp = (h >> np.uint32(10)) & np.uint32(0x1F)
    man = h & np.uint32(0x3FF)
    normal = np.uint32(((exp + np.uint32(112)) << np.uint32(23)) | (man << np.uint32(13))).view(np.float32)
    sub = np.float32(man) * np.float32(2.0**-24)
    v = sub if exp == 0 else normal
    return -v if h & np.uint32(0x8000) else v


@njit(cache=True, nogil=True, fastmath=_REASSOC)
def _dot_f32s(da, qa, db, qb):
    acc = np.float32(0.0)
    for k in range(qa.shape[0]):
        s = np.int32(0)
        for i in range(32):
            s += np.int32(qa[k, i]) * np.int32(qb[k, i])
        acc += (da[k] * db[k]) * np.float32(s)
    return acc


@njit(cache=True, nogil=True, fastmath=_REASSOC)
def _dot_f16s(ba, qa, bb, qb):
    acc = np.float32(0.0)
    for k in range(qa.shape[0]):
        s = np.int32(0)
        for i in range(32):
            s += np.int32(qa[k, i]) * np.int32(qb[k, i])
        acc += (_half_scale(ba[k]) * _half_scale(bb[k])) * np.float32(s)
    return acc, 2 * qa.shape[0]


def norm_f32(x: np.ndarray, eps: float) -> np.ndarray:
    return _norm(x, np.float32(eps))


def rms_norm_f32(x: np.ndarray, eps: float) -> np.ndarray:
    return _rms_norm(x, np.float32(eps))


def dot_partials_q8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _partials(np.ascontiguousarray(a["qs"]), np.ascontiguousarray(b["qs"]))


def vec_dot_q8(a: np.ndarray, b: np.ndarray) -> float:
    if a.dtype == BLOCK_Q8_F16S:
        acc, decodes = _dot_f16s(a["d"], a["qs"], b["d"], b["qs"])
        _record_decodes(decodes)
        return acc
    return _dot_f32s(a["d"], a["qs"], b["d"], b["qs"])


@njit(cache=True, nogil=True)
def _combine(dw, dx, partials):
    # per-block order and rounding match the scalar reference exactly;
    # the vector lanes run across output rows, never across blocks
    nb, m, rows = partials.shape
    dwt = np.ascontiguousarray(dw.T)
    acc = np.zeros((m, rows), dtype=np.float32)
    for j in range(m):
        for k in range(nb):
            s = dx[j, k]
            for r in range(rows):
                acc[j, r] += (dwt[k, r] * s) * partials[k, j, r]
    return acc


def _matmul_blocks(w: QMatrix, xq: np.ndarray) -> np.ndarray:
    panel = w.panel()
    xf = xq["qs"].astype(np.float32).transpose(1, 0, 2)
    partials = np.matmul(xf, panel.transpose(0, 2, 1))
    return _combine(block_scales(w.blocks), block_scales(xq), partials)


def matvec_q8(w: QMatrix, x: np.ndarray) -> np.ndarray:
    xq = quantize_blocks_vectorized(x.reshape(-1, 32), w.scale_format)
    return _matmul_blocks(w, xq[None, :])[0]


def matmul_q8(w: QMatrix, xs: np.ndarray) -> np.ndarray:
    m, c = xs.shape
    xq = quantize_blocks_vectorized(xs.reshape(-1, 32), w.scale_format)
    return np.ascontiguousarray(_matmul_blocks(w, xq.reshape(m, c // 32)))
