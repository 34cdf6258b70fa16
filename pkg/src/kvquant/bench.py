"""Benchmark harness: test matrix, warmup/median timing, CSV/JSON reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, TextIO, Union

import numpy as np
import psutil

from .backends import BackendId, get_backend
from .errors import ConfigurationError, KVQuantError, ResourceError
from .metrics import AttentionProbeSpec, ErrorReport, error_report
from .tensor import Fp32Matrix, Int8Matrix, QuantizedCache, RngSpec, ScaleVector, uniform_fill

log = logging.getLogger(__name__)

OPS = ("scales", "quantize", "dequantize", "roundtrip")
ALL_BACKENDS = tuple(BackendId)

# K, its reconstruction, a reference reconstruction (4 bytes each), plus two
# int8 code buffers
BYTES_PER_ELEMENT = 14

# name, tokens, head dim
STANDARD_SHAPES = (
    ("Small", 2048, 128),
    ("Medium", 16384, 256),
    ("Large", 65536, 256),
    ("Very Large", 131072, 256),
    ("Realistic Small", 131072, 1024),
    ("Realistic Medium", 131072, 2048),
    ("Realistic Large", 131072, 4096),
    ("Realistic V. Large", 131072, 8192),
)

CSV_FIELDS = (
    "config_name",
    "rows",
    "cols",
    "backend",
    "op",
    "time_ms_median",
    "time_ms_min",
    "speedup_vs_scalar",
    "l2_error",
    "max_abs_error",
    "attention_error",
    "theoretical_max",
)


class BackendMismatchError(KVQuantError):
    """A backend produced output that differs from scalar-ref."""


def round9(x: float) -> float:
    """Round to the 9 significant digits used in reports."""
    return float(format(x, ".9g"))


@dataclass(frozen=True)
class BenchConfig:
    name: str
    rows: int
    cols: int
    backends: tuple = ALL_BACKENDS
    ops: tuple = OPS
    warmup_runs: int = 2
    timed_runs: int = 5
    seed: int = 0
    probe: Optional[AttentionProbeSpec] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"{self.name}: dimensions must be >= 1")
        if self.timed_runs < 1:
            raise ConfigurationError(f"{self.name}: timed_runs must be >= 1")
        if self.warmup_runs < 0:
            raise ConfigurationError(f"{self.name}: warmup_runs must be >= 0")
        backends = tuple(get_backend(b).descriptor.id for b in self.backends)
        if not backends:
            raise ConfigurationError(f"{self.name}: no backends selected")
        object.__setattr__(self, "backends", backends)
        ops = tuple(self.ops)
        unknown = [op for op in ops if op not in OPS]
        if unknown or not ops:
            raise ConfigurationError(f"{self.name}: unknown ops {unknown}; valid: {', '.join(OPS)}")
        object.__setattr__(self, "ops", ops)

    @property
    def elements(self) -> int:
        return self.rows * self.cols

    @property
    def required_bytes(self) -> int:
        return self.elements * BYTES_PER_ELEMENT


@dataclass(frozen=True)
class TestMatrix:
    configs: tuple

    __test__ = False  # not a pytest class

    def __post_init__(self):
        configs = tuple(self.configs)
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate config names in {names}")
        object.__setattr__(self, "configs", configs)

    def __iter__(self):
        return iter(self.configs)

    def __len__(self):
        return len(self.configs)

    def __getitem__(self, name: str) -> BenchConfig:
        for c in self.configs:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class BenchRecord:
    """One timed (config, backend, op) cell. Floats are kept at report precision."""

    config_name: str
    rows: int
    cols: int
    backend: str
    op: str
    time_ms_median: float
    time_ms_min: float
    speedup_vs_scalar: float
    error: Optional[ErrorReport] = None
    timer_warning: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("time_ms_median", "time_ms_min", "speedup_vs_scalar"):
            object.__setattr__(self, name, round9(getattr(self, name)))
        if self.error is not None:
            e = self.error
            object.__setattr__(
                self,
                "error",
                ErrorReport(
                    l2=round9(e.l2),
                    max_abs=round9(e.max_abs),
                    theoretical_max=round9(e.theoretical_max),
                    attention_mean_abs=None
                    if e.attention_mean_abs is None
                    else round9(e.attention_mean_abs),
                ),
            )

    def as_row(self) -> dict:
        e = self.error
        return {
            "config_name": self.config_name,
            "rows": self.rows,
            "cols": self.cols,
            "backend": self.backend,
            "op": self.op,
            "time_ms_median": self.time_ms_median,
            "time_ms_min": self.time_ms_min,
            "speedup_vs_scalar": self.speedup_vs_scalar,
            "l2_error": None if e is None else e.l2,
            "max_abs_error": None if e is None else e.max_abs,
            "attention_error": None if e is None else e.attention_mean_abs,
            "theoretical_max": None if e is None else e.theoretical_max,
        }


def scaled_rows(rows: int, scale_factor: float) -> int:
    """``rows * scale_factor`` to the nearest multiple of 64 (ties up), at least 64."""
    return max(64, math.floor(rows * scale_factor / 64 + 0.5) * 64)


def default_test_matrix(
    scale_factor: float = 1.0,
    *,
    backends: Iterable = ALL_BACKENDS,
    ops: Iterable[str] = OPS,
    warmup_runs: int = 2,
    timed_runs: int = 5,
    seed: int = 0,
    probe: Optional[AttentionProbeSpec] = AttentionProbeSpec(),
) -> TestMatrix:
    """The eight benchmark shapes with token counts scaled by ``scale_factor``.

    Head dimensions are never scaled, since the error metrics depend on them.
    """
    if not 0 < scale_factor <= 1:
        raise ConfigurationError(f"scale_factor must be in (0, 1], got {scale_factor}")
    backends, ops = tuple(backends), tuple(ops)
    return TestMatrix(
        tuple(
            BenchConfig(
                name=name,
                rows=scaled_rows(rows, scale_factor),
                cols=cols,
                backends=backends,
                ops=ops,
                warmup_runs=warmup_runs,
                timed_runs=timed_runs,
                seed=seed,
                probe=probe,
            )
            for name, rows, cols in STANDARD_SHAPES
        )
    )


def default_memory_budget() -> int:
    return int(psutil.virtual_memory().available * 0.75)


def check_budget(matrix: Union[TestMatrix, Sequence[BenchConfig]], budget: int) -> None:
    for cfg in matrix:
        if cfg.required_bytes > budget:
            raise ResourceError(
                f"config {cfg.name!r} ({cfg.rows}x{cfg.cols}) needs ~{cfg.required_bytes / 1e9:.2f} GB, "
                f"budget is {budget / 1e9:.2f} GB"
            )


def _time_ms(fn: Callable[[], None], warmup: int, timed: int) -> list[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(timed):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples


class _Buffers:
    """Reference outputs (from scalar-ref) and scratch buffers for one config."""

    def __init__(self, K: np.ndarray):
        ref = get_backend(BackendId.SCALAR_REF)
        self.K = K
        self.ref_scales = np.empty(K.shape[1], dtype=np.float32)
        ref.scales_into(K, self.ref_scales)
        self.ref_q = np.empty(K.shape, dtype=np.int8)
        ref.quantize_into(K, self.ref_scales, self.ref_q)
        self.ref_recon = np.empty(K.shape, dtype=np.float32)
        ref.dequantize_into(self.ref_q, self.ref_scales, self.ref_recon)
        self.scales = np.empty_like(self.ref_scales)
        self.q = np.empty_like(self.ref_q)
        self.recon = np.empty_like(self.ref_recon)

    def op(self, backend, op: str, workers) -> Callable[[], None]:
        K, s, q, out = self.K, self.scales, self.q, self.recon
        if op == "scales":
            return lambda: backend.scales_into(K, s, workers)
        if op == "quantize":
            return lambda: backend.quantize_into(K, self.ref_scales, q, workers)
        if op == "dequantize":
            return lambda: backend.dequantize_into(self.ref_q, self.ref_scales, out, workers)

        def _roundtrip():
            backend.scales_into(K, s, workers)
            backend.quantize_into(K, s, q, workers)
            backend.dequantize_into(q, s, out, workers)

        return _roundtrip

    def verify(self, backend, op: str) -> None:
        checks = {
            "scales": (("scales", self.scales.view(np.uint32), self.ref_scales.view(np.uint32)),),
            "quantize": (("quantize", self.q, self.ref_q),),
            "dequantize": (("dequantize", self.recon.view(np.uint32), self.ref_recon.view(np.uint32)),),
            "roundtrip": (
                ("roundtrip scales", self.scales.view(np.uint32), self.ref_scales.view(np.uint32)),
                ("roundtrip codes", self.q, self.ref_q),
                ("roundtrip output", self.recon.view(np.uint32), self.ref_recon.view(np.uint32)),
            ),
        }[op]
        for what, got, want in checks:
            bad = np.flatnonzero(got.reshape(-1) != want.reshape(-1))
            if bad.size:
                idx = np.unravel_index(int(bad[0]), got.shape)
                raise BackendMismatchError(
                    f"{backend.name} {what} differs from scalar-ref at {tuple(int(i) for i in idx)}"
                )


def run_bench(
    matrix: Union[TestMatrix, Sequence[BenchConfig]],
    *,
    workers: Optional[int] = None,
    memory_budget: Optional[int] = None,
    progress: Optional[Callable[[BenchRecord], None]] = None,
) -> list[BenchRecord]:
    """Time every (config, backend, op) triple and attach error metrics.

    Configs run one after another. scalar-ref is always timed, because it is
    the speedup baseline, but it only yields records when requested. Every
    timed output is compared bit-for-bit against scalar-ref.
    """
    matrix = list(matrix)
    check_budget(matrix, default_memory_budget() if memory_budget is None else memory_budget)
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    records: list[BenchRecord] = []
    for cfg in matrix:
        log.info("config %s: %dx%d", cfg.name, cfg.rows, cfg.cols)
        K = uniform_fill(cfg.rows, cfg.cols, RngSpec(cfg.seed))
        bufs = _Buffers(K)

        err = None
        if cfg.probe is not None:
            cache = QuantizedCache(Int8Matrix(bufs.ref_q), ScaleVector(bufs.ref_scales))
            err = error_report(Fp32Matrix(K), cache, cfg.probe, reconstruction=Fp32Matrix(bufs.ref_recon))

        timed_backends = list(cfg.backends)
        if BackendId.SCALAR_REF in timed_backends:
            timed_backends.remove(BackendId.SCALAR_REF)
        timed_backends.insert(0, BackendId.SCALAR_REF)

        samples: dict[tuple, list[float]] = {}
        for bid in timed_backends:
            backend = get_backend(bid)
            for op in cfg.ops:
                samples[bid, op] = _time_ms(bufs.op(backend, op, workers), cfg.warmup_runs, cfg.timed_runs)
                bufs.verify(backend, op)

        for bid in cfg.backends:
            for op in cfg.ops:
                ts = samples[bid, op]
                median = max(statistics.median(ts), resolution_ms)
                tmin = max(min(ts), resolution_ms)
                base = max(statistics.median(samples[BackendId.SCALAR_REF, op]), resolution_ms)
                coarse = resolution_ms > 0.01 * tmin
                if coarse:
                    warnings.warn(
                        f"{cfg.name}/{bid}/{op}: timer resolution {resolution_ms:.3g} ms exceeds 1% of {tmin:.3g} ms",
                        RuntimeWarning,
                        stacklevel=2,
                    )
                rec = BenchRecord(
                    config_name=cfg.name,
                    rows=cfg.rows,
                    cols=cfg.cols,
                    backend=str(bid),
                    op=op,
                    time_ms_median=median,
                    time_ms_min=tmin,
                    speedup_vs_scalar=round9(base) / round9(median),
                    error=err,
                    timer_warning=coarse,
                )
                records.append(rec)
                if progress is not None:
                    progress(rec)
        del bufs, K
    return records


# -- reports ----------------------------------------------------------------


def report_meta(matrix: Union[TestMatrix, Sequence[BenchConfig]]) -> dict:
    probes = {c.probe for c in matrix if c.probe is not None}
    meta = {"distribution": "uniform[-1, 1)", "rng": "splitmix64"}
    if probes:
        p = next(iter(probes)) if len(probes) == 1 else None
        meta["attention_probe"] = (
            {"num_queries": p.num_queries, "max_rows": p.max_rows, "seed": p.seed} if p else "mixed"
        )
    return meta


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def emit_report(
    records: Sequence[BenchRecord],
    fmt: str = "csv",
    destination: Union[None, str, TextIO] = None,
    meta: Optional[dict] = None,
) -> str:
    """Serialize records as CSV or JSON; write to ``destination`` if given.

    ``meta`` is only carried by the JSON form; the CSV column set is fixed.
    """
    if not records:
        raise ValueError("no records to report")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in records:
            row = r.as_row()
            writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
        text = buf.getvalue()
    elif fmt == "json":
        doc = {"records": [r.as_row() for r in records]}
        if meta:
            doc = {"meta": meta, **doc}
        text = json.dumps(doc, indent=2) + "\n"
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}; valid: csv, json")
    if destination is None:
        return text
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _opt_float(v) -> Optional[float]:
    if v is None or v == "":
        return None
    return float(v)


def _record_from_row(row: dict) -> BenchRecord:
    err_fields = [_opt_float(row.get(k)) for k in ("l2_error", "max_abs_error", "attention_error", "theoretical_max")]
    err = None
    if any(v is not None for v in err_fields):
        l2, mx, attn, tmax = err_fields
        err = ErrorReport(l2=l2, max_abs=mx, theoretical_max=tmax, attention_mean_abs=attn)
    return BenchRecord(
        config_name=row["config_name"],
        rows=int(row["rows"]),
        cols=int(row["cols"]),
        backend=row["backend"],
        op=row["op"],
        time_ms_median=float(row["time_ms_median"]),
        time_ms_min=float(row["time_ms_min"]),
        speedup_vs_scalar=float(row["speedup_vs_scalar"]),
        error=err,
    )


def parse_report(text: str, fmt: str = "csv") -> list[BenchRecord]:
    """Inverse of :func:`emit_report`."""
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [_record_from_row(row) for row in reader]
    if fmt == "json":
        doc = json.loads(text)
        return [_record_from_row(row) for row in doc["records"]]
    raise ConfigurationError(f"unknown report format {fmt!r}; valid: csv, json")


def summary_table(records: Sequence[BenchRecord]) -> str:
    """Fixed-width text table of median times and speedups."""
    header = f"{'config':<20} {'rows':>7} {'cols':>5} {'backend':<15} {'op':<10} {'median ms':>10} {'speedup':>8}"
    lines = [header, "-" * len(header)]
    for r in records:
        lines.append(
            f"{r.config_name:<20} {r.rows:>7} {r.cols:>5} {r.backend:<15} {r.op:<10} "
            f"{r.time_ms_median:>10.3f} {r.speedup_vs_scalar:>8.2f}"
        )
    return "\n".join(lines)

