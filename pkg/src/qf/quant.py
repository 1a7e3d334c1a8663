"""Group-of-32 symmetric Int8 block quantization.

A block holds 32 signed quants and one scale ``d`` with
``x_i ~= d * q_i``. Quants are ``rint(x_i / d)`` with the quotient taken
in float64, which is exact enough that ties are true ties. The scale is stored either as a binary16 pattern
(34 bytes per block) or as a float32 (36 bytes per block). Blocks are
numpy structured records whose memory layout is the little-endian wire
layout, so ``blocks.tobytes()`` is directly the container payload.
"""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from qf.halffloat import (
    _float_bits_to_half,
    _half_to_float_bits,
    f16_to_f32_row_vectorized,
    f32_to_f16_row_vectorized,
)

QK = 32
QMAX = 127

BLOCK_Q8_F16S = np.dtype([("d", "<u2"), ("qs", "i1", (QK,))])
BLOCK_Q8_F32S = np.dtype([("d", "<f4"), ("qs", "i1", (QK,))])

# smallest positive float32, used when absmax/127 underflows to zero
_F32_TINY = np.float32(np.finfo(np.float32).smallest_subnormal)


class QuantizationError(ValueError):
    pass


class ScaleFormat(str, enum.Enum):
    F16S = "f16"
    F32S = "f32"

    @property
    def block_dtype(self) -> np.dtype:
        return BLOCK_Q8_F16S if self is ScaleFormat.F16S else BLOCK_Q8_F32S

    @property
    def block_bytes(self) -> int:
        return self.block_dtype.itemsize

    @property
    def tensor_format(self) -> "TensorFormat":
        return TensorFormat.Q8_F16S if self is ScaleFormat.F16S else TensorFormat.Q8_F32S


class TensorFormat(enum.IntEnum):
    F32 = 0
    F16 = 1
    Q8_F16S = 2
    Q8_F32S = 3

    @property
    def is_quantized(self) -> bool:
        return self in (TensorFormat.Q8_F16S, TensorFormat.Q8_F32S)

    @property
    def scale_format(self) -> ScaleFormat:
        if self is TensorFormat.Q8_F16S:
            return ScaleFormat.F16S
        if self is TensorFormat.Q8_F32S:
            return ScaleFormat.F32S
        raise ValueError(f"{self.name} has no block scale")


def container_bytes(n: int, fmt: TensorFormat) -> int:
    """Payload size in bytes of ``n`` elements stored as ``fmt``."""
    fmt = TensorFormat(fmt)
    if n < 0:
        raise ValueError(f"negative element count {n}")
    if fmt is TensorFormat.F32:
        return 4 * n
    if fmt is TensorFormat.F16:
        return 2 * n
    if n % QK:
        raise ValueError(f"{fmt.name} needs a multiple of {QK} elements, got {n}")
    return fmt.scale_format.block_bytes * (n // QK)


@dataclass
class QuantStats:
    max_abs_err: float
    rmse: float
    n_elements: int


# -- instrumentation --------------------------------------------------------


@dataclass
class ScaleDecodeCounter:
    count: int = 0


_counters: list[ScaleDecodeCounter] = []


@contextlib.contextmanager
def count_scale_decodes():
    """Count binary16 scale decodes performed by dequantize/dot paths.

    >>> with count_scale_decodes() as c:
    ...     _ = dequantize_row(quantize_row(np.ones(64), scale_format="f16")[0])
    >>> c.count
    2
    """
    counter = ScaleDecodeCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record_decodes(n: int) -> None:
    for c in _counters:
        c.count += n


def block_scales(blocks: np.ndarray) -> np.ndarray:
    """Float32 scales of ``blocks``; binary16 scales are decoded here."""
    if blocks.dtype == BLOCK_Q8_F32S:
        return blocks["d"]
    if blocks.dtype != BLOCK_Q8_F16S:
        raise TypeError(f"not a Q8 block array: {blocks.dtype}")
    d = blocks["d"]
    _record_decodes(d.size)
    return f16_to_f32_row_vectorized(d.reshape(-1)).reshape(d.shape)


def scale_format_of(blocks: np.ndarray) -> ScaleFormat:
    if blocks.dtype == BLOCK_Q8_F16S:
        return ScaleFormat.F16S
    if blocks.dtype == BLOCK_Q8_F32S:
        return ScaleFormat.F32S
    raise TypeError(f"not a Q8 block array: {blocks.dtype}")


# -- scalar reference -------------------------------------------------------


@njit(cache=True, nogil=True)
def _quantize_blocks_ref(x, half_scale):
    nb = x.shape[0]
    d_out = np.empty(nb, dtype=np.float32)
    bits_out = np.zeros(nb, dtype=np.uint16)
    qs = np.empty((nb, 32), dtype=np.int8)
    for b in range(nb):
        amax = np.float32(0.0)
        for i in range(32):
            a = abs(x[b, i])
            if a > amax:
                amax = a
        d = amax / np.float32(127.0)
        if half_scale:
            bits = _float_bits_to_half(np.float32(d).view(np.uint32))
            if amax > 0 and (bits & 0x7FFF) == 0x7C00:
                # overflowing scale, flagged to the caller
                bits_out[b] = bits
                d_out[b] = np.float32(np.inf)
                continue
            ds = np.uint32(_half_to_float_bits(bits)).view(np.float32)
            # below the binary16 normal range the rounded scale can be
            # too small to reach absmax; step it up until it covers
            while amax > 0 and (ds == 0 or amax / ds > np.float32(127.5)):
                bits = np.uint16(bits + 1)
                ds = np.uint32(_half_to_float_bits(bits)).view(np.float32)
            bits_out[b] = bits
            d = ds
        elif d == 0 and amax > 0:
            d = np.float32(1.401298464324817e-45)
        d_out[b] = d
        for i in range(32):
            if d == 0:
                qs[b, i] = 0
            else:
                q = np.rint(np.float64(x[b, i]) / np.float64(d))
                if q > 127:
                    q = 127
                elif q < -127:
                    q = -127
                qs[b, i] = np.int8(q)
    return d_out, bits_out, qs


@njit(cache=True, nogil=True)
def _dequantize_blocks_ref(d, qs):
    nb = qs.shape[0]
    out = np.empty((nb, 32), dtype=np.float32)
    for b in range(nb):
        for i in range(32):
            out[b, i] = d[b] * np.float32(qs[b, i])
    return out


def _pack(d_or_bits: np.ndarray, qs: np.ndarray, fmt: ScaleFormat) -> np.ndarray:
    blocks = np.empty(qs.shape[0], dtype=fmt.block_dtype)
    blocks["d"] = d_or_bits
    blocks["qs"] = qs
    return blocks


def _check_overflow(d: np.ndarray) -> None:
    if np.isinf(d).any():
        k = int(np.flatnonzero(np.isinf(d))[0])
        raise QuantizationError(
            f"block {k}: scale exceeds the binary16 range (absmax > {65504 * 127})"
        )


def quantize_blocks_reference(x: np.ndarray, fmt: ScaleFormat) -> np.ndarray:
    fmt = ScaleFormat(fmt)
    d, bits, qs = _quantize_blocks_ref(x, fmt is ScaleFormat.F16S)
    if fmt is ScaleFormat.F16S:
        _check_overflow(d)
        return _pack(bits, qs, fmt)
    return _pack(d, qs, fmt)


def dequantize_blocks_reference(blocks: np.ndarray) -> np.ndarray:
    return _dequantize_blocks_ref(block_scales(blocks), np.ascontiguousarray(blocks["qs"]))


# -- vectorized -------------------------------------------------------------


@njit(cache=True, nogil=True)
def _quantize_blocks_simd(x, half_scale):
    # same arithmetic as the reference, arranged as straight-line passes
    # over each block (abs-max, then divide/round/clamp) that vectorize
    nb = x.shape[0]
    d_out = np.empty(nb, dtype=np.float32)
    bits_out = np.zeros(nb, dtype=np.uint16)
    qs = np.empty((nb, 32), dtype=np.int8)
    for b in range(nb):
        amax = np.float32(0.0)
        for i in range(32):
            amax = max(amax, abs(x[b, i]))
        d = amax / np.float32(127.0)
        if half_scale:
            bits = _float_bits_to_half(np.float32(d).view(np.uint32))
            if amax > 0 and (bits & 0x7FFF) == 0x7C00:
                bits_out[b] = bits
                d_out[b] = np.float32(np.inf)
                continue
            d = np.uint32(_half_to_float_bits(bits)).view(np.float32)
            while amax > 0 and (d == 0 or amax / d > np.float32(127.5)):
                bits = np.uint16(bits + 1)
                d = np.uint32(_half_to_float_bits(bits)).view(np.float32)
            bits_out[b] = bits
        elif d == 0 and amax > 0:
            d = np.float32(1.401298464324817e-45)
        d_out[b] = d
        inv = np.float64(d)
        for i in range(32):
            q = np.rint(np.float64(x[b, i]) / inv) if inv != 0 else 0.0
            qs[b, i] = np.int8(min(max(q, -127.0), 127.0))
    return d_out, bits_out, qs


def quantize_blocks_vectorized(x: np.ndarray, fmt: ScaleFormat) -> np.ndarray:
    fmt = ScaleFormat(fmt)
    d, bits, qs = _quantize_blocks_simd(x, fmt is ScaleFormat.F16S)
    if fmt is ScaleFormat.F16S:
        _check_overflow(d)
        return _pack(bits, qs, fmt)
    return _pack(d, qs, fmt)


def dequantize_blocks_vectorized(blocks: np.ndarray) -> np.ndarray:
    return block_scales(blocks)[:, None] * blocks["qs"].astype(np.float32)


# -- public operations ------------------------------------------------------


def _as_blocks_input(x, n=None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32).reshape(-1)
    if n is not None:
        if n > arr.shape[0]:
            raise ValueError(f"row has {arr.shape[0]} elements, {n} requested")
        arr = arr[:n]
    if arr.shape[0] == 0 or arr.shape[0] % QK:
        raise QuantizationError(
            f"row length {arr.shape[0]} is not a positive multiple of {QK}"
        )
    if not np.isfinite(arr).all():
        k = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise QuantizationError(f"non-finite input at element {k}")
    return np.ascontiguousarray(arr.reshape(-1, QK))


def quantize_block(x, scale_format: ScaleFormat | str = ScaleFormat.F16S) -> np.void:
    """Quantize exactly 32 finite values into one block record."""
    arr = np.asarray(x, dtype=np.float32).reshape(-1)
    if arr.shape[0] != QK:
        raise QuantizationError(f"a block holds {QK} values, got {arr.shape[0]}")
    return quantize_blocks_reference(_as_blocks_input(arr), ScaleFormat(scale_format))[0]


def dequantize_block(block) -> np.ndarray:
    blocks = np.asarray(block).reshape(-1)
    if blocks.shape[0] != 1:
        raise ValueError("expected a single block")
    return dequantize_blocks_reference(blocks)[0]


def quantize_row(x, n=None, scale_format: ScaleFormat | str = ScaleFormat.F16S):
    """Quantize a row into ``n // 32`` blocks.

    Returns ``(blocks, stats)`` where ``stats`` measures the round-trip
    error against the input in float64.
    """
    from qf.kernels import get_kernels

    src = _as_blocks_input(x, n)
    blocks = get_kernels().active("quantize_blocks")(src, ScaleFormat(scale_format))
    return blocks, quant_stats(src, blocks)


def dequantize_row(blocks: np.ndarray) -> np.ndarray:
    from qf.kernels import get_kernels

    return get_kernels().active("dequantize_blocks")(blocks).reshape(-1)


def quant_stats(x, blocks: np.ndarray) -> QuantStats:
    ref = np.asarray(x, dtype=np.float64).reshape(-1)
    if blocks.dtype == BLOCK_Q8_F16S:
        d = f16_to_f32_row_vectorized(blocks["d"])
    else:
        d = blocks["d"]
    deq = d[:, None] * blocks["qs"].astype(np.float32)
    err = np.abs(ref - deq.reshape(-1).astype(np.float64))
    return QuantStats(
        max_abs_err=float(err.max()) if err.size else 0.0,
        rmse=float(np.sqrt(np.mean(err * err))) if err.size else 0.0,
        n_elements=int(ref.size),
    )


@dataclass(eq=False)
class QMatrix:
    """A row-major ``rows x cols`` matrix stored as Q8 blocks.

    ``blocks`` has shape ``(rows, cols // 32)``. The vectorized kernels
    keep a float32 copy of the quants laid out block-major (one panel per
    block column); it is built on first use and holds exact small
    integers, so it changes no result.
    """

    blocks: np.ndarray
    _panel: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_float(cls, w, scale_format: ScaleFormat | str = ScaleFormat.F16S) -> "QMatrix":
        w = np.asarray(w, dtype=np.float32)
        if w.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {w.shape}")
        rows, cols = w.shape
        if cols % QK:
            raise QuantizationError(f"inner dimension {cols} not divisible by {QK}")
        blocks, _ = quantize_row(w.reshape(-1), scale_format=scale_format)
        return cls(blocks.reshape(rows, cols // QK))

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocks.shape[0], self.blocks.shape[1] * QK

    @property
    def scale_format(self) -> ScaleFormat:
        return scale_format_of(self.blocks)

    @property
    def nbytes(self) -> int:
        return self.blocks.nbytes

    def panel(self) -> np.ndarray:
        if self._panel is None:
            self._panel = np.ascontiguousarray(
                self.blocks["qs"].transpose(1, 0, 2).astype(np.float32)
            )
        return self._panel

    def dequantize(self) -> np.ndarray:
        rows, cols = self.shape
        return dequantize_blocks_vectorized(self.blocks.reshape(-1)).reshape(rows, cols)
