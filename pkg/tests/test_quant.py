import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qf.quant import (
    BLOCK_Q8_F16S,
    BLOCK_Q8_F32S,
    QMatrix,
    QuantizationError,
    ScaleFormat,
    TensorFormat,
    block_scales,
    container_bytes,
    count_scale_decodes,
    dequantize_block,
    dequantize_blocks_reference,
    dequantize_blocks_vectorized,
    dequantize_row,
    quant_stats,
    quantize_block,
    quantize_blocks_reference,
    quantize_blocks_vectorized,
    quantize_row,
)

FORMATS = list(ScaleFormat)


def test_block_layout():
    assert BLOCK_Q8_F16S.itemsize == 34
    assert BLOCK_Q8_F32S.itemsize == 36
    b = quantize_block(np.arange(32, dtype=np.float32), "f16")
    raw = np.array(b).tobytes()
    assert len(raw) == 34
    assert raw[:2] == np.uint16(b["d"]).tobytes()
    assert np.frombuffer(raw[2:], np.int8).tolist() == list(b["qs"])


def test_zero_block():
    b = quantize_block(np.zeros(32, np.float32), "f32")
    assert b["d"] == 0.0
    assert not b["qs"].any()
    assert not dequantize_block(b).any()


def test_constant_block():
    b = quantize_block(np.ones(32, np.float32), "f32")
    assert b["d"] == np.float32(1) / np.float32(127)
    assert (b["qs"] == 127).all()
    y = dequantize_block(b)
    assert np.all(np.abs(y - 1.0) <= np.spacing(np.float32(1.0)))


def test_single_peak_block():
    x = np.zeros(32, np.float32)
    x[0] = -2.0
    b = quantize_block(x, "f32")
    assert b["d"] == np.float32(2) / np.float32(127)
    assert b["qs"][0] == -127
    assert not b["qs"][1:].any()


def test_random_block_f64_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(32).astype(np.float32)
    b = quantize_block(x, "f16")
    d = float(block_scales(np.array([b]))[0])
    y = dequantize_block(b).astype(np.float64)
    # f64 oracle: round-half-even of x/d, clamped
    q = np.clip(np.rint(x.astype(np.float64) / d), -127, 127)
    np.testing.assert_array_equal(b["qs"], q)
    assert np.all(np.abs(x - y) <= d / 2 + np.spacing(np.abs(y).astype(np.float32)))


def test_row_examples():
    blocks, stats = quantize_row(np.ones(32, np.float32))
    assert blocks.shape == (1,)
    alt = np.tile([1.0, -1.0], 32).astype(np.float32)
    blocks, stats = quantize_row(alt, 64, "f32")
    assert blocks.shape == (2,)
    assert blocks["d"][0] == blocks["d"][1] == np.float32(1) / np.float32(127)
    assert set(blocks["qs"].ravel().tolist()) == {127, -127}
    assert stats.n_elements == 64
    assert 0 <= stats.rmse <= stats.max_abs_err


@pytest.mark.parametrize("bad", [np.ones(33), np.ones(0), np.ones(31)])
def test_row_length_must_be_multiple_of_32(bad):
    with pytest.raises(QuantizationError):
        quantize_row(bad.astype(np.float32))


@pytest.mark.parametrize("value", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(value):
    x = np.zeros(32, np.float32)
    x[3] = value
    with pytest.raises(QuantizationError):
        quantize_block(x)


def test_f16_scale_overflow_rejected():
    x = np.full(32, 3e38, np.float32)
    with pytest.raises(QuantizationError):
        quantize_block(x, "f16")
    assert np.isfinite(dequantize_block(quantize_block(x, "f32"))).all()


def test_tiny_blocks_keep_bound():
    # scales below the smallest binary16 subnormal
    x = np.linspace(-1e-9, 1e-9, 32).astype(np.float32)
    for fmt in FORMATS:
        b = quantize_block(x, fmt)
        d = float(block_scales(np.array([b]))[0])
        assert d > 0
        assert np.max(np.abs(x - dequantize_block(b))) <= d / 2 + 1e-45


@pytest.mark.parametrize("n, fmt, size", [
    (32, TensorFormat.Q8_F16S, 34),
    (32, TensorFormat.Q8_F32S, 36),
    (32, TensorFormat.F32, 128),
    (32, TensorFormat.F16, 64),
    (4096, TensorFormat.Q8_F16S, 4352),
])
def test_container_bytes(n, fmt, size):
    assert container_bytes(n, fmt) == size


def test_container_bytes_rejects_partial_block():
    with pytest.raises(ValueError):
        container_bytes(33, TensorFormat.Q8_F16S)


@given(st.integers(1, 1 << 20))
def test_size_identity(nb):
    n = 32 * nb
    assert container_bytes(n, TensorFormat.Q8_F32S) * 34 == container_bytes(n, TensorFormat.Q8_F16S) * 36


def _bound_violations(x, fmt):
    blocks = quantize_blocks_reference(x, fmt)
    y = dequantize_blocks_reference(blocks).astype(np.float64)
    d = block_scales(blocks).astype(np.float64)[:, None]
    ulp = np.spacing(np.abs(y).astype(np.float32)).astype(np.float64)
    return int(((np.abs(x.astype(np.float64) - y) > d / 2 + ulp)).sum()), blocks


@pytest.mark.parametrize("fmt", FORMATS)
def test_round_trip_bound_f64(fmt):
    rng = np.random.default_rng(17)
    x = (rng.standard_normal((20000, 32)) * 10.0 ** rng.uniform(-4, 4, (20000, 1))).astype(np.float32)
    bad, blocks = _bound_violations(x, fmt)
    assert bad == 0
    qs = blocks["qs"]
    assert qs.min() >= -127
    # the absmax element lands on +-127 unless a subnormal f16 scale was bumped
    normal = block_scales(blocks) >= 2.0**-14
    assert normal.mean() > 0.5
    assert (np.abs(qs[normal]).max(axis=1) == 127).all()


block = st.lists(st.floats(-1e4, 1e4, width=32), min_size=32, max_size=32)


@settings(max_examples=300, deadline=None)
@given(block, st.sampled_from(FORMATS))
def test_round_trip_bound_property(values, fmt):
    x = np.array(values, np.float32).reshape(1, 32)
    bad, _ = _bound_violations(x, fmt)
    assert bad == 0


@settings(max_examples=300, deadline=None)
@given(st.lists(block, min_size=1, max_size=8), st.sampled_from(FORMATS))
def test_vectorized_quantizer_bit_identical(rows, fmt):
    x = np.array(rows, np.float32)
    ref = quantize_blocks_reference(x, fmt)
    assert ref.tobytes() == quantize_blocks_vectorized(x, fmt).tobytes()
    assert (dequantize_blocks_reference(ref).view(np.uint32)
            == dequantize_blocks_vectorized(ref).view(np.uint32)).all()


def _block_rmse(x, fmt):
    y = dequantize_blocks_reference(quantize_blocks_reference(x, fmt)).astype(np.float64)
    return np.sqrt(((x.astype(np.float64) - y) ** 2).mean(axis=1))


@pytest.mark.xfail(strict=True, reason="f16 scale rounding lowers the error of roughly half of all blocks")
def test_rmse_ordering_per_block():
    x = np.random.default_rng(2).standard_normal((1000, 32)).astype(np.float32)
    assert (_block_rmse(x, "f32") <= _block_rmse(x, "f16") + 1e-7).all()


@pytest.mark.parametrize("magnitude", [1e-6, 1e-3, 1.0, 1e3])
def test_rmse_ordering_aggregate(magnitude):
    x = (np.random.default_rng(2).standard_normal((50000, 32)) * magnitude).astype(np.float32)
    f32 = np.sqrt((_block_rmse(x, "f32") ** 2).mean())
    f16 = np.sqrt((_block_rmse(x, "f16") ** 2).mean())
    assert f32 <= f16


def test_stats_are_f64_exact():
    x = np.random.default_rng(4).standard_normal(256).astype(np.float32)
    blocks, stats = quantize_row(x, scale_format="f32")
    err = np.abs(x.astype(np.float64) - dequantize_row(blocks))
    assert stats.max_abs_err == pytest.approx(err.max(), rel=1e-6)
    assert stats.rmse == pytest.approx(np.sqrt((err ** 2).mean()), rel=1e-6)
    assert quant_stats(x, blocks) == stats


def test_scale_decode_counter():
    blocks16, _ = quantize_row(np.ones(128, np.float32), scale_format="f16")
    blocks32, _ = quantize_row(np.ones(128, np.float32), scale_format="f32")
    with count_scale_decodes() as c:
        dequantize_row(blocks32)
    assert c.count == 0
    with count_scale_decodes() as c:
        dequantize_row(blocks16)
    assert c.count == 4


def test_qmatrix():
    w = np.random.default_rng(8).standard_normal((5, 96)).astype(np.float32)
    m = QMatrix.from_float(w, "f32")
    assert m.shape == (5, 96)
    assert m.nbytes == 5 * 3 * 36
    assert m.scale_format is ScaleFormat.F32S
    assert np.abs(m.dequantize() - w).max() <= np.abs(w).max() / 127
    with pytest.raises(QuantizationError):
        QMatrix.from_float(np.ones((2, 33), np.float32))
