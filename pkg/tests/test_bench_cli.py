import csv
import io
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest

from qf.bench import CSV_COLUMNS, BenchConfig, compare_runs, run_bench
from qf.cli import main
from qf.quant import TensorFormat
from qf.tensorio import QTensor, save_model

SMALL = dict(hidden_dim=64, ffn_dim=128, n_layers=2, prefill_tokens=4, decode_steps=4,
             warmup_iters=0, repeat_count=5)

GOLDEN_HEADER = "run_id,metric,value,unit,scale_format,dispatch,threads,seed"


@pytest.fixture(scope="module")
def small_report():
    return run_bench(BenchConfig(**SMALL))


def test_csv_header_golden(small_report):
    assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER
    assert small_report.to_csv().splitlines()[0] == GOLDEN_HEADER


def test_csv_five_samples_and_one_median_per_metric(small_report):
    rows = list(csv.DictReader(io.StringIO(small_report.to_csv())))
    per_metric = Counter(r["metric"] for r in rows)
    medians = Counter(r["metric"] for r in rows if r["run_id"] == "median")
    assert {"prefill_rate", "decode_rate", "resident_memory"} <= set(per_metric)
    assert any(m.startswith("kernel.vec_dot_q8") for m in per_metric)
    assert any(m.startswith("container_bytes.") for m in per_metric)
    for metric, n in per_metric.items():
        assert n == 6, metric
        assert medians[metric] == 1
    for r in rows:
        assert r["scale_format"] == "f16"
        assert float(r["value"]) >= 0


def test_report_contents(small_report):
    r = small_report
    assert r.prefill_rate > 0 and r.decode_rate > 0
    assert min(r.decode_rates) <= r.decode_rate <= max(r.decode_rates)
    assert r.container_bytes["Q8_F32S"] * 34 == r.container_bytes["Q8_F16S"] * 36
    assert r.container_bytes["F32"] * 34 == r.container_bytes["Q8_F16S"] * 128
    text = r.to_text()
    assert "prefill" in text and "decode" in text and "+5.88%" in text


def test_force_scalar_is_deterministic():
    cfg = BenchConfig(**SMALL, force_scalar=True)
    a, b = run_bench(cfg), run_bench(cfg)
    assert a.dispatch == "scalar"
    assert a.computed_outputs() == b.computed_outputs()
    assert not any("differ" in f for f in a.flags + b.flags)


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(hidden_dim=48)
    with pytest.raises(ValueError):
        BenchConfig(repeat_count=0)
    with pytest.raises(ValueError):
        BenchConfig(warmup_iters=-1)


def test_compare_runs_flags(small_report):
    import copy

    slow = copy.copy(small_report)
    slow.decode_rates = [r / 10 for r in small_report.decode_rates]
    assert compare_runs(small_report, slow, small_report, slow) == []
    flags = compare_runs(slow, small_report, slow, small_report)
    assert len(flags) == 2


def test_cli_bench_writes_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--hidden", "64", "--ffn", "128", "--layers", "1", "--prefill-tokens", "2",
                 "--decode-steps", "2", "--repeat", "2", "--warmup", "0", "--csv", str(out)])
    assert code == 0
    assert out.read_text().splitlines()[0] == GOLDEN_HEADER
    assert "dispatch" in capsys.readouterr().out


def test_cli_bench_invalid_config():
    with pytest.raises(SystemExit) as e:
        main(["bench", "--hidden", "0"])
    assert e.value.code != 0
    assert main(["bench", "--hidden", "48"]) == 3


def source_model(path):
    rng = np.random.default_rng(0)
    save_model([
        QTensor.from_array("up", rng.standard_normal((64, 128))),
        QTensor.from_array("down", rng.standard_normal((128, 64))),
    ], path)


def test_cli_quantize_reports_ratio(tmp_path, capsys):
    src = tmp_path / "src.qtc"
    source_model(src)
    for fmt in ("f16", "f32"):
        assert main(["quantize", "--in", str(src), "--out", str(tmp_path / f"{fmt}.qtc"),
                     "--scale-format", fmt]) == 0
        out = capsys.readouterr().out
        assert "F32S/F16S ratio 1.058824 (+5.88%)" in out
    sizes = {fmt: (tmp_path / f"{fmt}.qtc").stat().st_size for fmt in ("f16", "f32")}
    assert sizes["f32"] - sizes["f16"] == 2 * (64 * 128 * 2) // 32


def test_cli_quantize_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.qtc"
    assert main(["quantize", "--in", str(missing), "--out", str(tmp_path / "o.qtc")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_quantize_corrupt_file(tmp_path):
    bad = tmp_path / "bad.qtc"
    bad.write_bytes(b"QTC1garbage")
    assert main(["quantize", "--in", str(bad), "--out", str(tmp_path / "o.qtc")]) == 2


def test_cli_quantize_already_quantized(tmp_path, capsys):
    src = tmp_path / "q.qtc"
    save_model([QTensor.from_array("w", np.ones((2, 32)), TensorFormat.Q8_F16S)], src)
    assert main(["quantize", "--in", str(src), "--out", str(tmp_path / "o.qtc")]) == 3
    assert "source must be F32/F16" in capsys.readouterr().err


def test_cli_verify_passes(capsys):
    assert main(["verify", "--cases", "200"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_cli_verify_forced_scalar(monkeypatch, capsys):
    monkeypatch.setenv("QF_FORCE_SCALAR", "1")
    from qf.kernels import set_kernels

    set_kernels(None)
    try:
        assert main(["verify", "--cases", "200"]) == 0
        assert "dispatch: scalar" in capsys.readouterr().out
    finally:
        set_kernels(None)


@pytest.mark.parametrize("kernel, suite", [("vec_dot_q8", "kernels"), ("f32_to_f16_row", "f16"),
                                           ("quantize_blocks", "quant")])
def test_cli_verify_fault_injection(monkeypatch, capsys, kernel, suite):
    monkeypatch.setenv("QF_INJECT_FAULT", kernel)
    assert main(["verify", "--suite", suite, "--cases", "100"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and kernel in out and "seed=0" in out and "first mismatch at index" in out


def test_cli_verify_unknown_fault(monkeypatch):
    monkeypatch.setenv("QF_INJECT_FAULT", "no_such_kernel")
    assert main(["verify", "--suite", "f16", "--cases", "1"]) == 3


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "qf.cli", "verify", "--suite", "f16", "--cases", "10"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "PASS f16" in r.stdout


def test_interleaved_matches_separate_runs():
    from qf.bench import run_interleaved

    cfgs = [BenchConfig(**SMALL, scale_format="f16"), BenchConfig(**{**SMALL, "repeat_count": 2}, scale_format="f32")]
    both = run_interleaved(cfgs)
    assert [len(r.decode_rates) for r in both] == [5, 2]
    for cfg, r in zip(cfgs, both):
        assert r.computed_outputs() == run_bench(cfg).computed_outputs()
