"""IEEE 754 binary16 codec and bulk row conversions.

Every conversion works on raw bit patterns so results are reproducible
across implementations. The row routines come in two flavours that must
agree bit for bit: a scalar reference that branches per element (and
renormalizes subnormals in a loop), and a branch-free variant whose loop
body the compiler turns into SIMD selects.
"""
from __future__ import annotations

import numpy as np
from numba import njit

F16_MAX = 65504.0
F16_QNAN = 0x7E00
F16_INF = 0x7C00


@njit(cache=True, nogil=True)
def _half_to_float_bits(h):
    h = np.uint32(h) & np.uint32(0xFFFF)
    sign = (h & np.uint32(0x8000)) << np.uint32(16)
    exp = (h >> np.uint32(10)) & np.uint32(0x1F)
    man = h & np.uint32(0x3FF)
    if exp == 0:
        if man == 0:
            return sign
        # renormalize the subnormal significand
        e = np.uint32(113)
        while (man & np.uint32(0x400)) == 0:
            man <<= np.uint32(1)
            e -= np.uint32(1)
        man &= np.uint32(0x3FF)
        return sign | (e << np.uint32(23)) | (man << np.uint32(13))
    if exp == 31:
        return sign | np.uint32(0x7F800000) | (man << np.uint32(13))
    return sign | ((exp + np.uint32(112)) << np.uint32(23)) | (man << np.uint32(13))


@njit(cache=True, nogil=True)
def _round_shift(m, shift):
    # m >> shift, round half to even
    q = m >> shift
    rem = m & ((np.uint32(1) << shift) - np.uint32(1))
    half = np.uint32(1) << (shift - np.uint32(1))
    if rem > half or (rem == half and (q & np.uint32(1)) != 0):
        q += np.uint32(1)
    return q


@njit(cache=True, nogil=True)
def _float_bits_to_half(f):
    f = np.uint32(f)
    sign = (f >> np.uint32(16)) & np.uint32(0x8000)
    exp = np.int64((f >> np.uint32(23)) & np.uint32(0xFF))
    man = f & np.uint32(0x7FFFFF)
    if exp == 0xFF:
        if man != 0:
            return np.uint16(sign | np.uint32(F16_QNAN))
        return np.uint16(sign | np.uint32(F16_INF))
    e = exp - 112
    if e >= 31:
        return np.uint16(sign | np.uint32(F16_INF))
    if e <= 0:
        # f32 subnormals (exp == 0) are far below the f16 range
        if exp == 0:
            return np.uint16(sign)
        shift = 14 - e
        if shift > 24:
            return np.uint16(sign)
        q = _round_shift(man | np.uint32(0x800000), np.uint32(shift))
        return np.uint16(sign | q)
    h = (np.uint32(e) << np.uint32(10)) + _round_shift(man, np.uint32(13))
    if h >= np.uint32(F16_INF):
        h = np.uint32(F16_INF)
    return np.uint16(sign | h)


@njit(cache=True, nogil=True)
def _f16_to_f32_row_ref(src):
    out = np.empty(src.shape[0], dtype=np.uint32)
    for i in range(src.shape[0]):
        out[i] = _half_to_float_bits(src[i])
    return out


@njit(cache=True, nogil=True)
def _f32_to_f16_row_ref(src_bits):
    out = np.empty(src_bits.shape[0], dtype=np.uint16)
    for i in range(src_bits.shape[0]):
        out[i] = _float_bits_to_half(src_bits[i])
    return out


def _as_half_bits(src, n=None) -> np.ndarray:
    arr = np.asarray(src)
    if arr.dtype == np.float16:
        arr = arr.view(np.uint16)
    arr = arr.reshape(-1).astype(np.uint16, copy=False)
    if n is not None:
        if n > arr.shape[0]:
            raise ValueError(f"row has {arr.shape[0]} elements, {n} requested")
        arr = arr[:n]
    return np.ascontiguousarray(arr)


def _as_f32(src, n=None) -> np.ndarray:
    arr = np.asarray(src, dtype=np.float32).reshape(-1)
    if n is not None:
        if n > arr.shape[0]:
            raise ValueError(f"row has {arr.shape[0]} elements, {n} requested")
        arr = arr[:n]
    return np.ascontiguousarray(arr)


def f16_decode(b: int) -> float:
    """Return the value of a binary16 bit pattern (exact, as a Python float).

    >>> f16_decode(0x3C00), f16_decode(0x7BFF), f16_decode(0x0001) == 2.0**-24
    (1.0, 65504.0, True)
    """
    bits = _half_to_float_bits(int(b) & 0xFFFF)
    return float(np.uint32(bits).view(np.float32))


def f16_encode(x: float) -> int:
    """Round a float32 value to the nearest binary16 pattern (ties to even).

    Overflow saturates to a signed infinity and every NaN maps to the
    quiet NaN 0x7E00 with the input's sign bit.

    >>> hex(f16_encode(65504.0)), hex(f16_encode(1e9)), hex(f16_encode(-0.0))
    ('0x7bff', '0x7c00', '0x8000')
    """
    bits = np.float32(x).view(np.uint32)
    return int(_float_bits_to_half(bits))


def f16_to_f32_row_reference(src, n=None) -> np.ndarray:
    return _f16_to_f32_row_ref(_as_half_bits(src, n)).view(np.float32)


def f32_to_f16_row_reference(src, n=None) -> np.ndarray:
    return _f32_to_f16_row_ref(_as_f32(src, n).view(np.uint32))


@njit(cache=True, nogil=True)
def _f16_to_f32_row_simd(src):
    # branch-free per element so the loop compiles to vector selects
    out = np.empty(src.shape[0], dtype=np.uint32)
    for i in range(src.shape[0]):
        h = np.uint32(src[i])
        sign = (h & np.uint32(0x8000)) << np.uint32(16)
        exp = (h >> np.uint32(10)) & np.uint32(0x1F)
        man = h & np.uint32(0x3FF)
        normal = ((exp + np.uint32(112)) << np.uint32(23)) | (man << np.uint32(13))
        special = np.uint32(0x7F800000) | (man << np.uint32(13))
        # m * 2**-24 is exact in float32: covers zero and subnormals
        sub = np.float32(np.float32(man) * np.float32(2.0**-24)).view(np.uint32)
        v = special if exp == 31 else normal
        v = sub if exp == 0 else v
        out[i] = v | sign
    return out


@njit(cache=True, nogil=True)
def _f32_to_f16_row_simd(src_bits):
    out = np.empty(src_bits.shape[0], dtype=np.uint16)
    for i in range(src_bits.shape[0]):
        f = src_bits[i]
        sign = (f >> np.uint32(16)) & np.uint32(0x8000)
        exp = np.int32((f >> np.uint32(23)) & np.uint32(0xFF))
        man = f & np.uint32(0x7FFFFF)
        e = exp - 112

        # normal range: drop 13 mantissa bits, a carry may bump the exponent
        q = man >> np.uint32(13)
        rem = man & np.uint32(0x1FFF)
        q += np.uint32((rem > 0x1000) | ((rem == 0x1000) & ((q & 1) == 1)))
        normal = min((np.uint32(min(max(e, 0), 31)) << np.uint32(10)) + q, np.uint32(F16_INF))

        # subnormal range: variable shift of the full significand
        shift = np.uint32(min(max(14 - e, 14), 25))
        full = man | np.uint32(0x800000)
        qs = full >> shift
        rs = full & ((np.uint32(1) << shift) - np.uint32(1))
        hs = np.uint32(1) << (shift - np.uint32(1))
        qs += np.uint32((rs > hs) | ((rs == hs) & ((qs & 1) == 1)))

        h = normal if e >= 1 else qs
        h = np.uint32(0) if exp == 0 else h
        h = np.uint32(F16_INF) if e >= 31 else h
        nan_or_inf = np.uint32(F16_QNAN) if man != 0 else np.uint32(F16_INF)
        h = nan_or_inf if exp == 0xFF else h
        out[i] = np.uint16(h | sign)
    return out


def f16_to_f32_row_vectorized(src, n=None) -> np.ndarray:
    return _f16_to_f32_row_simd(_as_half_bits(src, n)).view(np.float32)


def f32_to_f16_row_vectorized(src, n=None) -> np.ndarray:
    return _f32_to_f16_row_simd(_as_f32(src, n).view(np.uint32))


def f16_to_f32_row(src, n=None) -> np.ndarray:
    """Decode ``n`` binary16 patterns to float32 with the active kernel."""
    from qf.kernels import get_kernels

    return get_kernels().active("f16_to_f32_row")(src, n)


def f32_to_f16_row(src, n=None) -> np.ndarray:
    """Encode ``n`` float32 values to binary16 patterns with the active kernel."""
    from qf.kernels import get_kernels

    return get_kernels().active("f32_to_f16_row")(src, n)
