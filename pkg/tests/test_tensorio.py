import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from qf.quant import TensorFormat, container_bytes
from qf.tensorio import (
    MAGIC,
    ModelFormatError,
    QTensor,
    SourceFormatError,
    decode_model,
    encode_model,
    load_model,
    quantize_model,
    quantize_tensors,
    save_model,
)


def f32(name, shape, seed=0):
    a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    return QTensor.from_array(name, a)


def entry_size(name, n_dims):
    return 4 + len(name.encode()) + 4 + 8 * n_dims + 4 + 8 + 8


def test_empty_model(tmp_path):
    p = tmp_path / "empty.qtc"
    save_model([], p)
    data = p.read_bytes()
    assert len(data) == 20
    assert data[:4] == MAGIC
    assert load_model(p) == []


def test_single_tensor_layout(tmp_path):
    p = tmp_path / "one.qtc"
    save_model([f32("w", (32,))], p)
    assert p.stat().st_size == 20 + entry_size("w", 1) + 128


def test_save_is_deterministic():
    tensors = [f32("a", (2, 32)), f32("b", (7,), 1)]
    assert encode_model(tensors) == encode_model(tensors)


def test_round_trip(tmp_path):
    tensors = [
        f32("embed", (4, 64)),
        QTensor.from_array("w.q", np.ones((3, 64), np.float32), TensorFormat.Q8_F32S),
        QTensor.from_array("bias", np.arange(5, dtype=np.float32), TensorFormat.F16),
    ]
    p = tmp_path / "m.qtc"
    save_model(tensors, p)
    assert load_model(p) == tensors
    np.testing.assert_array_equal(load_model(p)[2].to_array(), np.arange(5))


def test_truncated_payload_names_tensor():
    data = encode_model([f32("first", (32,)), f32("second", (64,))])
    with pytest.raises(ModelFormatError) as e:
        decode_model(data[:-1])
    assert e.value.tensor == "second"
    assert "second" in str(e.value)


def test_truncated_table_names_tensor():
    data = encode_model([f32("only", (2, 32))])
    # the table entry is cut off mid-way, before the payload region starts
    header = struct.pack("<4sIIQ", MAGIC, 1, 1, 30)
    with pytest.raises(ModelFormatError) as e:
        decode_model(header + data[20:30])
    assert e.value.tensor is not None


def patch_entry(tensor: QTensor, **fields):
    """Encode one tensor, then rewrite fields of its table entry."""
    data = bytearray(encode_model([tensor]))
    name = tensor.name.encode()
    pos = 20 + 4 + len(name)
    n_dims = len(tensor.dims)
    if "dims" in fields:
        for i, d in enumerate(fields["dims"]):
            struct.pack_into("<Q", data, pos + 4 + 8 * i, d)
    tail = pos + 4 + 8 * n_dims
    if "format" in fields:
        struct.pack_into("<I", data, tail, fields["format"])
    if "offset" in fields:
        struct.pack_into("<Q", data, tail + 4, fields["offset"])
    return bytes(data)


def test_q8_inner_dim_33_rejected():
    # 33 x 32 elements is a whole number of blocks but the rows are not
    t = QTensor.from_array("w", np.ones((32, 33), np.float32), TensorFormat.F32)
    q = QTensor("w", (33, 32), TensorFormat.Q8_F16S, bytes(container_bytes(33 * 32, TensorFormat.Q8_F16S)))
    data = patch_entry(q, dims=(32, 33))
    with pytest.raises(ModelFormatError, match="divisible"):
        decode_model(data)
    with pytest.raises(ModelFormatError):
        QTensor("w", (32, 33), TensorFormat.Q8_F16S, q.payload).validate()
    assert t.dims == (32, 33)


@pytest.mark.parametrize("mutate, match", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
    (lambda d: d[:12] + struct.pack("<Q", 1 << 40) + d[20:], "offset"),
    (lambda d: d[:10], "header"),
])
def test_header_errors(mutate, match):
    data = encode_model([f32("w", (32,))])
    with pytest.raises(ModelFormatError, match=match):
        decode_model(mutate(data))


def test_unknown_format_rejected():
    with pytest.raises(ModelFormatError, match="format") as e:
        decode_model(patch_entry(f32("w", (32,)), format=7))
    assert e.value.tensor == "w"


def test_overlapping_payloads_rejected():
    data = bytearray(encode_model([f32("a", (32,)), f32("b", (32,))]))
    # point b's payload at a's
    pos = 20 + entry_size("a", 1) + 4 + 1 + 4 + 8 + 4
    struct.pack_into("<Q", data, pos, 0)
    with pytest.raises(ModelFormatError, match="overlap"):
        decode_model(bytes(data))


def test_duplicate_names_rejected():
    with pytest.raises(ModelFormatError, match="duplicate"):
        encode_model([f32("a", (32,)), f32("a", (32,))])


@settings(max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.binary(max_size=4096))
def test_parser_total_on_random_bytes(data):
    try:
        decode_model(data)
    except ModelFormatError:
        pass


@settings(max_examples=500, deadline=None)
@given(st.data())
def test_parser_total_on_corrupted_models(data):
    good = encode_model([f32("w", (2, 32)), QTensor.from_array("q", np.ones((1, 64)), TensorFormat.Q8_F16S)])
    buf = bytearray(good)
    for _ in range(data.draw(st.integers(1, 8))):
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] = data.draw(st.integers(0, 255))
    cut = data.draw(st.integers(0, len(buf)))
    try:
        decode_model(bytes(buf[:cut]))
    except ModelFormatError:
        pass


def test_parser_total_on_large_stream():
    data = np.random.default_rng(0).integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    for prefix in (b"", MAGIC + struct.pack("<IIQ", 1, 3, 20)):
        try:
            decode_model(prefix + data)
        except ModelFormatError:
            pass


def write_source(path):
    tensors = [
        f32("up", (64, 128), 1),
        f32("down", (128, 64), 2),
        f32("bias", (128,), 3),
        QTensor.from_array("half", np.random.default_rng(4).standard_normal((8, 32)), TensorFormat.F16),
    ]
    save_model(tensors, path)
    return tensors


def test_quantize_model_sizes(tmp_path):
    src = tmp_path / "src.qtc"
    write_source(src)
    r16 = quantize_model(src, "f16", tmp_path / "q16.qtc")
    r32 = quantize_model(src, "f32", tmp_path / "q32.qtc")
    assert r32.quantized_bytes * 34 == r16.quantized_bytes * 36
    by_name = {t.name: t for t in r16.tensors}
    for name in ("up", "down"):
        assert by_name[name].bytes_after * 128 == by_name[name].bytes_before * 34
    assert by_name["half"].bytes_after * 64 == by_name["half"].bytes_before * 34
    assert by_name["bias"].dst_format is TensorFormat.F32
    assert by_name["bias"].stats is None
    loaded = {t.name: t for t in load_model(tmp_path / "q16.qtc")}
    assert loaded["up"].format is TensorFormat.Q8_F16S
    assert loaded["bias"].format is TensorFormat.F32


def test_bias_passes_through_unchanged(tmp_path):
    src = tmp_path / "src.qtc"
    original = {t.name: t for t in write_source(src)}
    quantize_model(src, "f32", tmp_path / "q.qtc")
    loaded = {t.name: t for t in load_model(tmp_path / "q.qtc")}
    assert loaded["bias"] == original["bias"]


@pytest.mark.parametrize("fmt", ["f16", "f32"])
def test_requantization_is_idempotent(tmp_path, fmt):
    src = tmp_path / "src.qtc"
    write_source(src)
    first, _ = quantize_tensors(load_model(src), fmt)
    decoded = [QTensor.from_array(t.name, t.to_array()) for t in first]
    second, _ = quantize_tensors(decoded, fmt)
    for a, b in zip(first, second):
        if a.format.is_quantized:
            assert a.payload == b.payload


def test_quantized_source_rejected(tmp_path):
    src = tmp_path / "src.qtc"
    write_source(src)
    quantize_model(src, "f16", tmp_path / "q.qtc")
    with pytest.raises(SourceFormatError, match="source must be F32/F16"):
        quantize_model(tmp_path / "q.qtc", "f32", tmp_path / "again.qtc")
