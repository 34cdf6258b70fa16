import csv
import io
import json

import numpy as np
import pytest

from kvquant import fileformat
from kvquant.cli import EXIT_FORMAT, EXIT_OK, EXIT_RESOURCE, EXIT_USAGE, main
from kvquant.tensor import Fp32Matrix, QuantizedCache


@pytest.fixture
def k_file(tmp_path):
    path = tmp_path / "k.kvq"
    assert main(["gen", "1024", "256", "--seed", "7", "--out", str(path)]) == EXIT_OK
    return path


def test_gen_is_deterministic(tmp_path, k_file):
    again = tmp_path / "k2.kvq"
    assert main(["gen", "1024", "256", "--seed", "7", "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == k_file.read_bytes()
    assert k_file.stat().st_size == 13 + 1024 * 256 * 4
    K = fileformat.read_file(k_file)
    assert isinstance(K, Fp32Matrix) and K.data.min() >= -1 and K.data.max() < 1


def test_gen_seed_changes_output(tmp_path, k_file):
    other = tmp_path / "k3.kvq"
    main(["gen", "1024", "256", "--seed", "8", "--out", str(other)])
    assert other.read_bytes() != k_file.read_bytes()


def test_quantize_and_dequantize(tmp_path, k_file, capsys):
    q_path = tmp_path / "k.q"
    assert main(["quantize", str(k_file), "--out", str(q_path), "--verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "compression ratio 4.0" in out
    assert q_path.stat().st_size == 13 + 262_144 + 256 * 4
    cache = fileformat.read_file(q_path)
    assert isinstance(cache, QuantizedCache)

    r_path = tmp_path / "k.r"
    assert main(["dequantize", str(q_path), "--out", str(r_path), "--backend", "coarsened", "--verify"]) == EXIT_OK
    K = fileformat.read_file(k_file).data.astype(np.float64)
    K_hat = fileformat.read_file(r_path).data
    bound = cache.scales.scales / 2 + 2.0**-20
    assert (np.abs(K - K_hat) <= bound).all()


@pytest.mark.parametrize("backend", ["scalar-ref", "parallel-naive", "blocked", "coarsened", "vectorized"])
def test_quantize_identical_across_backends(tmp_path, k_file, backend):
    ref = tmp_path / "ref.q"
    got = tmp_path / f"{backend}.q"
    main(["quantize", str(k_file), "--out", str(ref), "--backend", "scalar-ref"])
    main(["quantize", str(k_file), "--out", str(got), "--backend", backend, "--workers", "3"])
    assert got.read_bytes() == ref.read_bytes()


def test_dequantize_rejects_fp32_input(tmp_path, k_file, capsys):
    assert main(["dequantize", str(k_file), "--out", str(tmp_path / "x")]) == EXIT_FORMAT
    assert "dtype" in capsys.readouterr().err


def test_truncated_input(tmp_path, k_file, capsys):
    bad = tmp_path / "bad.kvq"
    bad.write_bytes(k_file.read_bytes()[:-10])
    assert main(["quantize", str(bad), "--out", str(tmp_path / "x")]) == EXIT_FORMAT
    err = capsys.readouterr().err
    assert "payload" in err and str(bad) in err


def test_bad_magic(tmp_path, capsys):
    bad = tmp_path / "bad.kvq"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["quantize", str(bad), "--out", str(tmp_path / "x")]) == EXIT_FORMAT
    assert "magic" in capsys.readouterr().err


def test_zero_dimension_is_usage_error(tmp_path):
    assert main(["gen", "0", "4", "--out", str(tmp_path / "z")]) == EXIT_USAGE


def test_unknown_backend_is_usage_error(tmp_path, k_file, capsys):
    assert main(["quantize", str(k_file), "--out", str(tmp_path / "x"), "--backend", "gpu"]) == EXIT_USAGE
    assert "scalar-ref" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path):
    assert main(["quantize", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 6


def test_memory_budget_exceeded(tmp_path, k_file):
    assert main(["quantize", str(k_file), "--out", str(tmp_path / "x"), "--memory-budget", "1k"]) == EXIT_RESOURCE


def test_estimate(capsys):
    assert main(["estimate"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "137,438,953,472 bytes (137.4 GB)" in out
    assert "34,359,738,368 bytes (34.4 GB)" in out
    assert "ratio fp32/int8: 4.0" in out
    assert main(["estimate", "--precision", "fp16"]) == EXIT_OK
    assert "(68.7 GB)" in capsys.readouterr().out


def test_estimate_overflow(capsys):
    args = ["estimate", "--layers", "65536", "--heads", "65536", "--head-dim", "65536", "--seq-len", "65536"]
    assert main(args) == EXIT_USAGE


def test_validate(tmp_path, capsys):
    report = tmp_path / "v.json"
    assert main(["validate", "--json", str(report)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out
    doc = json.loads(report.read_text())
    assert doc["total"] >= 25 and doc["failures"] == []


def test_validate_unknown_category():
    assert main(["validate", "--categories", "speed"]) == EXIT_USAGE


def test_bench_csv(tmp_path, capsys):
    out = tmp_path / "b.csv"
    args = [
        "bench", "--scale-factor", "0.01", "--backends", "scalar-ref,vectorized",
        "--ops", "quantize,dequantize", "--warmup-runs", "1", "--timed-runs", "2", "--out", str(out),
    ]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 8 * 2 * 2
    assert {r["backend"] for r in rows} == {"scalar-ref", "vectorized"}
    assert all(r["attention_error"] for r in rows)


def test_bench_json_stdout(capsys):
    args = [
        "bench", "--scale-factor", "0.01", "--backends", "blocked", "--ops", "scales",
        "--configs", "Small,Medium", "--timed-runs", "1", "--format", "json", "--no-probe",
    ]
    assert main(args) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["meta"]["distribution"].startswith("uniform")
    assert [r["config_name"] for r in doc["records"]] == ["Small", "Medium"]
    assert doc["records"][0]["l2_error"] is None


def test_bench_unknown_config():
    assert main(["bench", "--configs", "Huge"]) == EXIT_USAGE


def test_env_override(tmp_path, k_file, monkeypatch):
    monkeypatch.setenv("KVQUANT_BACKEND", "blocked")
    monkeypatch.setenv("KVQUANT_OUT", str(tmp_path / "env.q"))
    assert main(["quantize", str(k_file)]) == EXIT_OK
    assert (tmp_path / "env.q").exists()
    monkeypatch.setenv("KVQUANT_BACKEND", "gpu")
    assert main(["quantize", str(k_file)]) == EXIT_USAGE
