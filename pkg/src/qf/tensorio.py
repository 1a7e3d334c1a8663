"""Minimal binary tensor container and the model quantizer.

Layout (all little-endian)::

    header   magic "QTC1" | version u32 | tensor_count u32 | payload_offset u64
    entry    name_len u32 | name (UTF-8) | n_dims u32 | dims u64 x n_dims
             | format u32 | offset u64 | nbytes u64
    payload  tensor payloads; offsets are relative to payload_offset

Q8 payloads are the raw block records from :mod:`qf.quant`.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qf.halffloat import f16_to_f32_row_vectorized, f32_to_f16_row_vectorized
from qf.quant import (
    QK,
    QuantStats,
    ScaleFormat,
    TensorFormat,
    container_bytes,
    dequantize_blocks_vectorized,
    quantize_row,
)

MAGIC = b"QTC1"
VERSION = 1
MAX_DIMS = 4

_HEADER = struct.Struct("<4sIIQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_ENTRY_TAIL = struct.Struct("<IQQ")


class ModelFormatError(ValueError):
    """A container failed validation; ``tensor`` names the culprit if known."""

    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(f"tensor {tensor!r}: {message}" if tensor is not None else message)


class SourceFormatError(ValueError):
    pass


@dataclass
class QTensor:
    name: str
    dims: tuple[int, ...]
    format: TensorFormat
    payload: bytes = field(repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.format = TensorFormat(self.format)
        self.payload = bytes(self.payload)

    @property
    def n_elements(self) -> int:
        return math.prod(self.dims)

    @classmethod
    def from_array(cls, name: str, array, fmt: TensorFormat = TensorFormat.F32) -> "QTensor":
        a = np.asarray(array, dtype=np.float32)
        fmt = TensorFormat(fmt)
        if fmt is TensorFormat.F32:
            payload = a.astype("<f4").tobytes()
        elif fmt is TensorFormat.F16:
            payload = f32_to_f16_row_vectorized(a.reshape(-1)).astype("<u2").tobytes()
        else:
            blocks, _ = quantize_row(a.reshape(-1), scale_format=fmt.scale_format)
            payload = blocks.tobytes()
        t = cls(name, a.shape, fmt, payload)
        t.validate()
        return t

    def validate(self) -> None:
        if not 1 <= len(self.dims) <= MAX_DIMS:
            raise ModelFormatError(f"{len(self.dims)} dims (1..{MAX_DIMS} allowed)", self.name)
        if any(d < 0 for d in self.dims):
            raise ModelFormatError(f"negative extent in {self.dims}", self.name)
        if self.format.is_quantized and self.dims[-1] % QK:
            raise ModelFormatError(
                f"inner extent {self.dims[-1]} not divisible by {QK} for {self.format.name}",
                self.name,
            )
        expected = container_bytes(self.n_elements, self.format)
        if len(self.payload) != expected:
            raise ModelFormatError(
                f"payload is {len(self.payload)} bytes, {self.format.name} needs {expected}",
                self.name,
            )

    def blocks(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=self.format.scale_format.block_dtype)

    def to_array(self) -> np.ndarray:
        """Decode the payload to float32 with shape ``dims``."""
        if self.format is TensorFormat.F32:
            flat = np.frombuffer(self.payload, dtype="<f4").astype(np.float32)
        elif self.format is TensorFormat.F16:
            flat = f16_to_f32_row_vectorized(np.frombuffer(self.payload, dtype="<u2"))
        else:
            flat = dequantize_blocks_vectorized(self.blocks()).reshape(-1)
        return flat.reshape(self.dims)


def encode_model(tensors: list[QTensor]) -> bytes:
    names = set()
    table = bytearray()
    offset = 0
    for t in tensors:
        t.validate()
        if t.name in names:
            raise ModelFormatError("duplicate tensor name", t.name)
        names.add(t.name)
        name = t.name.encode("utf-8")
        table += _U32.pack(len(name)) + name + _U32.pack(len(t.dims))
        table += b"".join(_U64.pack(d) for d in t.dims)
        table += _ENTRY_TAIL.pack(int(t.format), offset, len(t.payload))
        offset += len(t.payload)
    payload_offset = _HEADER.size + len(table)
    header = _HEADER.pack(MAGIC, VERSION, len(tensors), payload_offset)
    return header + bytes(table) + b"".join(t.payload for t in tensors)


def save_model(tensors: list[QTensor], path: str | os.PathLike) -> None:
    data = encode_model(tensors)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.pos = _HEADER.size
        self.limit = limit

    def take(self, n: int, what: str, tensor: str | None) -> bytes:
        if self.pos + n > self.limit:
            raise ModelFormatError(f"tensor table truncated while reading {what}", tensor)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what, tensor):
        return _U32.unpack(self.take(4, what, tensor))[0]

    def u64(self, what, tensor):
        return _U64.unpack(self.take(8, what, tensor))[0]


def decode_model(data: bytes) -> list[QTensor]:
    """Parse a container image; every failure is a :class:`ModelFormatError`."""
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"file is {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, count, payload_offset = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    if payload_offset < _HEADER.size or payload_offset > len(data):
        raise ModelFormatError(f"payload offset {payload_offset} outside file of {len(data)} bytes")

    reader = _Reader(data, payload_offset)
    entries = []
    for i in range(count):
        label = f"#{i}"
        name_len = reader.u32("name length", label)
        raw = reader.take(name_len, "name", label)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("name is not valid UTF-8", label) from None
        n_dims = reader.u32("dim count", name)
        if not 1 <= n_dims <= MAX_DIMS:
            raise ModelFormatError(f"{n_dims} dims (1..{MAX_DIMS} allowed)", name)
        dims = tuple(reader.u64("dims", name) for _ in range(n_dims))
        fmt_code = reader.u32("format", name)
        offset = reader.u64("offset", name)
        nbytes = reader.u64("byte count", name)
        try:
            fmt = TensorFormat(fmt_code)
        except ValueError:
            raise ModelFormatError(f"unknown format code {fmt_code}", name) from None
        entries.append((name, dims, fmt, offset, nbytes))

    payload_size = len(data) - payload_offset
    seen = set()
    spans = []
    tensors = []
    for name, dims, fmt, offset, nbytes in entries:
        if name in seen:
            raise ModelFormatError("duplicate tensor name", name)
        seen.add(name)
        if fmt.is_quantized and dims[-1] % QK:
            raise ModelFormatError(
                f"inner extent {dims[-1]} not divisible by {QK} for {fmt.name}", name
            )
        expected = container_bytes(math.prod(dims), fmt)
        if nbytes != expected:
            raise ModelFormatError(f"records {nbytes} bytes, {fmt.name} {dims} needs {expected}", name)
        if offset + nbytes > payload_size:
            raise ModelFormatError(
                f"payload [{offset}, {offset + nbytes}) runs past the end of the file "
                f"({payload_size} payload bytes)",
                name,
            )
        spans.append((offset, offset + nbytes, name))
        start = payload_offset + offset
        tensors.append(QTensor(name, dims, fmt, data[start:start + nbytes]))

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0 and e1 > s1:
            raise ModelFormatError(f"payload overlaps tensor {n0!r}", n1)
    return tensors


def load_model(path: str | os.PathLike) -> list[QTensor]:
    return decode_model(Path(path).read_bytes())


# -- quantizer ----------------------------------------------------------------


@dataclass
class TensorReport:
    name: str
    dims: tuple[int, ...]
    src_format: TensorFormat
    dst_format: TensorFormat
    bytes_before: int
    bytes_after: int
    stats: QuantStats | None = None


@dataclass
class QuantReport:
    scale_format: ScaleFormat
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def bytes_before(self) -> int:
        return sum(t.bytes_before for t in self.tensors)

    @property
    def bytes_after(self) -> int:
        return sum(t.bytes_after for t in self.tensors)

    @property
    def quantized_bytes(self) -> int:
        return sum(t.bytes_after for t in self.tensors if t.stats is not None)

    @property
    def quantized_source_bytes(self) -> int:
        return sum(t.bytes_before for t in self.tensors if t.stats is not None)


def is_quantizable(t: QTensor) -> bool:
    return len(t.dims) == 2 and t.dims[-1] > 0 and t.dims[-1] % QK == 0 and t.n_elements > 0


def quantize_tensors(tensors: list[QTensor], scale_format: ScaleFormat | str) -> tuple[list[QTensor], QuantReport]:
    fmt = ScaleFormat(scale_format)
    report = QuantReport(fmt)
    out = []
    for t in tensors:
        if t.format not in (TensorFormat.F32, TensorFormat.F16):
            raise SourceFormatError(
                f"source must be F32/F16; tensor {t.name!r} is {t.format.name}"
            )
        if not is_quantizable(t):
            out.append(t)
            report.tensors.append(
                TensorReport(t.name, t.dims, t.format, t.format, len(t.payload), len(t.payload))
            )
            continue
        values = t.to_array()
        blocks, stats = quantize_row(values.reshape(-1), scale_format=fmt)
        q = QTensor(t.name, t.dims, fmt.tensor_format, blocks.tobytes())
        out.append(q)
        report.tensors.append(
            TensorReport(t.name, t.dims, t.format, q.format, len(t.payload), len(q.payload), stats)
        )
    return out, report


def quantize_model(src: str | os.PathLike, scale_format: ScaleFormat | str, dst: str | os.PathLike) -> QuantReport:
    """Quantize every 2-D tensor with a 32-divisible inner extent.

    Other tensors (biases, odd shapes) are copied through unchanged.
    """
    tensors = load_model(src)
    out, report = quantize_tensors(tensors, scale_format)
    save_model(out, dst)
    return report
