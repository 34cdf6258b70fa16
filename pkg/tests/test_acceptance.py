"""Acceptance criteria, one test each, at their stated tolerances.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the pytest
terminal summary). Run with ``pytest tests/test_acceptance.py -s -v``.
"""

import csv
import io
import re

import numpy as np
import pytest

from kvquant import fileformat
from kvquant.backends import BackendId, dequantize, get_backend, quantize, quantize_cache, roundtrip
from kvquant.bench import BenchConfig, default_test_matrix, emit_report, parse_report, round9, run_bench
from kvquant.cli import main
from kvquant.metrics import AttentionProbeSpec, attention_error, max_abs_error
from kvquant.scaler import compute_scales_ref
from kvquant.tensor import Fp32Matrix, RngSpec, estimate_kv_bytes, make_fp32
from kvquant.validation import run_suite, suite_matrices

from conftest import ACCEPTANCE_LINES

EPS = 2.0**-20
ALL = list(BackendId)


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_01_max_abs_error_constant():
    got = {}
    for rows, cols in ((2048, 128), (16384, 256), (6528, 1024)):
        K = make_fp32(rows, cols, RngSpec(0))
        got[f"{rows}x{cols}"] = max_abs_error(K, roundtrip(K))
    ok = all(0.00374 <= v <= 0.00394 for v in got.values())
    detail = ", ".join(f"{k}={v:.7f}" for k, v in got.items()) + " (want [0.00374, 0.00394])"
    verdict(1, "max-abs error constant", ok, detail)


def _mixed_matrix(rng, i):
    rows = int(rng.integers(1, 513))
    cols = int(rng.integers(1, 513))
    kind = i % 8
    if kind == 0:
        K = rng.uniform(-1, 1, (rows, cols))
    elif kind == 1:
        K = rng.normal(0, rng.uniform(0.01, 100), (rows, cols))
    elif kind == 2:
        K = rng.standard_t(1.5, (rows, cols)) * 10.0
    elif kind == 3:
        K = np.full((rows, cols), rng.uniform(-50, 50))
    elif kind == 4:
        amp = rng.uniform(0.1, 10)
        K = amp * np.where((np.add.outer(np.arange(rows), np.arange(cols)) % 2) == 0, 1.0, -1.0)
    elif kind == 5:
        K = rng.uniform(-1, 1, (rows, cols)) * (rng.random((rows, cols)) < 0.05)
    elif kind == 6:
        # every column on its own scale, some columns all zero
        K = rng.uniform(-1, 1, (rows, cols)) * 10.0 ** rng.uniform(-6, 6, cols)
        K[:, rng.random(cols) < 0.1] = 0.0
    else:
        K = rng.uniform(-1, 1, (rows, cols)) * 1e-30
    return Fp32Matrix(K.astype(np.float32))


def test_02_error_bound():
    rng = np.random.default_rng(20240601)
    n_matrices, n_elements, violations = 120, 0, 0
    for i in range(n_matrices):
        K = _mixed_matrix(rng, i)
        for backend in ("scalar-ref", "vectorized"):
            cache = quantize_cache(K, backend)
            K_hat = dequantize(cache.q, cache.scales, backend)
            x = K.data.astype(np.float64)
            limit = cache.scales.scales.astype(np.float64)[None, :] / 2 + EPS * np.maximum(1.0, np.abs(x))
            violations += int(np.count_nonzero(np.abs(x - K_hat.data) > limit))
            n_elements += K.data.size
    verdict(
        2,
        "error bound |x - xhat| <= s/2 + 2^-20 max(1,|x|)",
        violations == 0 and n_matrices >= 100,
        f"{n_matrices} matrices, {n_elements} element checks, {violations} violations",
    )


def test_03_attention_error_magnitude():
    K = make_fp32(2048, 8192, RngSpec(0))
    err = attention_error(K, roundtrip(K), AttentionProbeSpec(num_queries=32))
    verdict(3, "attention error magnitude at D=8192", 0.080 <= err <= 0.110, f"{err:.5f} (want [0.080, 0.110])")


def test_04_attention_error_sqrt_d_scaling():
    ratios = []
    for seed in range(5):
        errs = []
        for dim in (1024, 4096):
            K = make_fp32(2048, dim, RngSpec(seed))
            errs.append(attention_error(K, roundtrip(K), AttentionProbeSpec(num_queries=32, seed=seed)))
        ratios.append(errs[1] / errs[0])
    mean = float(np.mean(ratios))
    verdict(
        4,
        "attention error ~ sqrt(D)",
        1.7 <= mean <= 2.3,
        f"mean ratio D4096/D1024 over 5 seeds = {mean:.4f} (want [1.7, 2.3]; per seed {', '.join(f'{r:.3f}' for r in ratios)})",
    )


def test_05_backend_bit_equivalence():
    rng = np.random.default_rng(55)
    cases = list(suite_matrices())
    widths = [1, 3, 5, 6, 7, 9, 13, 31, 33, 63, 65, 127, 129, 255, 257, 511, 1023, 4, 64, 1024]
    for w in widths:
        rows = int(rng.integers(1, 300))
        cases.append((f"random-{rows}x{w}", make_fp32(rows, w, RngSpec(int(rng.integers(1 << 30)), -8.0, 8.0))))
    ref = get_backend(BackendId.SCALAR_REF)
    mismatches, compared = 0, 0
    for label, K in cases:
        s = compute_scales_ref(K)
        want_q = quantize(K, s, ref)
        want_x = dequantize(want_q, s, ref)
        for b in ALL:
            for workers in (1, 3):
                got_q = quantize(K, s, b, workers)
                got_x = dequantize(want_q, s, b, workers)
                mismatches += int(np.count_nonzero(got_q.data != want_q.data))
                mismatches += int(np.count_nonzero(got_x.data.view(np.uint32) != want_x.data.view(np.uint32)))
                compared += 2 * K.data.size
    non4 = sum(1 for _, K in cases if K.cols % 4)
    verdict(
        5,
        "backend bit-equivalence",
        mismatches == 0,
        f"{len(cases)} matrices ({non4} with width % 4 != 0), 5 backends, {compared} elements, {mismatches} mismatches",
    )


def test_06_memory_model(capsys):
    fp32 = estimate_kv_bytes(32, 32, 128, 131072, 4)
    int8 = estimate_kv_bytes(32, 32, 128, 131072, 1)
    code = main(["estimate", "--layers", "32", "--heads", "32", "--head-dim", "128", "--seq-len", "131072", "--precision", "fp32"])
    out = capsys.readouterr().out
    reported = [int(m.replace(",", "")) for m in re.findall(r"([\d,]+) bytes", out)]
    ok = code == 0 and fp32 == 137_438_953_472 and reported == [fp32, int8] and int8 * 4 == fp32
    verdict(6, "memory model", ok, f"fp32 {fp32:,} B, int8 {int8:,} B, reported {reported}")


def test_07_compression_ratio(tmp_path):
    checked = []
    for rows, cols in ((1, 1), (7, 5), (128, 1024), (333, 257)):
        K = make_fp32(rows, cols, RngSpec(rows))
        k_path, q_path = tmp_path / f"k{rows}.kvq", tmp_path / f"q{rows}.kvq"
        fileformat.write_file(K, k_path)
        assert main(["quantize", str(k_path), "--out", str(q_path)]) == 0
        fp32_payload = k_path.stat().st_size - fileformat.HEADER_SIZE
        int8_payload = q_path.stat().st_size - fileformat.HEADER_SIZE - 4 * cols
        checked.append((fp32_payload, int8_payload))
    ok = all(i8 * 4 == f32 for f32, i8 in checked)
    verdict(7, "compression ratio", ok, "; ".join(f"fp32 {f32} B vs int8 {i8} B" for f32, i8 in checked))


def test_08_validation_suite():
    res = run_suite()
    verdict(8, "validation suite", res.total >= 25 and not res.failures, f"{res.passed}/{res.total} passed, failures {res.failures}")


@pytest.mark.slow
def test_09_performance_direction():
    cfg = default_test_matrix(
        0.25,
        backends=("scalar-ref", "vectorized", "parallel-naive"),
        ops=("quantize",),
        probe=None,
    )["Realistic Small"]
    records = {r.backend: r for r in run_bench([cfg], workers=4)}
    scalar = records["scalar-ref"].time_ms_median
    vec = records["vectorized"].time_ms_median
    naive = records["parallel-naive"].speedup_vs_scalar
    ok = vec <= scalar and naive >= 2.0
    verdict(
        9,
        "performance direction",
        ok,
        f"{cfg.rows}x{cfg.cols} quantize: scalar-ref {scalar:.2f} ms, vectorized {vec:.2f} ms "
        f"(want <= scalar), parallel-naive with 4 workers {naive:.2f}x (want >= 2x)",
    )


def test_10_report_integrity():
    backends = ("scalar-ref", "blocked", "vectorized")
    ops = ("scales", "quantize", "dequantize")
    configs = [
        BenchConfig("a", 256, 64, backends=backends, ops=ops, warmup_runs=1, timed_runs=3),
        BenchConfig("b", 128, 37, backends=backends, ops=ops, warmup_runs=1, timed_runs=3),
    ]
    text = emit_report(run_bench(configs), "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    parsed = parse_report(text, "csv")
    base = {(r["config_name"], r["op"]): float(r["time_ms_median"]) for r in rows if r["backend"] == "scalar-ref"}
    bad = [
        r for r in parsed if r.speedup_vs_scalar != round9(base[r.config_name, r.op] / r.time_ms_median)
    ]
    expected = len(configs) * len(backends) * len(ops)
    verdict(
        10,
        "report integrity",
        len(rows) == expected and not bad,
        f"{len(rows)} CSV rows (want {expected}), {len(bad)} speedup mismatches",
    )
