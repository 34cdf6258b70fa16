"""``kvquant`` command-line entry point.

Every flag can also be set through an environment variable named
``KVQUANT_<FLAG>`` (e.g. ``KVQUANT_BACKEND=blocked``); explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from . import fileformat
from .backends import BackendId, dequantize_cache, get_backend, quantize_cache
from .bench import OPS, default_memory_budget, default_test_matrix, emit_report, report_meta, run_bench, summary_table
from .errors import ConfigurationError, DimensionError, FormatError, KVOverflowError, ResourceError
from .metrics import AttentionProbeSpec, theoretical_max_error
from .tensor import Fp32Matrix, QuantizedCache, RngSpec, decimal_gb, estimate_kv_bytes, make_fp32
from .validation import CATEGORIES, run_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_RESOURCE = 4
EXIT_VALIDATION = 5
EXIT_IO = 6

ENV_PREFIX = "KVQUANT_"

PRECISION_BYTES = {"fp32": 4, "fp16": 2, "int8": 1}

# budget for single-file commands: input, codes and output buffers
_FILE_BYTES_PER_ELEMENT = 9

log = logging.getLogger("kvquant")


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def _env_bool(name: str) -> bool:
    return str(_env(name, "")).lower() in ("1", "true", "yes", "on")


def _parse_bytes(text: str) -> int:
    units = {"k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12}
    t = text.strip().lower().rstrip("b")
    mult = 1
    if t and t[-1] in units:
        mult, t = units[t[-1]], t[:-1]
    try:
        value = int(float(t) * mult)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad byte count {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("memory budget must be positive")
    return value


def _backend_name(text: str) -> str:
    try:
        return str(get_backend(text).descriptor.id)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _backend_list(text: str) -> tuple:
    return tuple(_backend_name(t.strip()) for t in text.split(",") if t.strip())


def _op_list(text: str) -> tuple:
    ops = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [op for op in ops if op not in OPS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ops {bad}; valid: {', '.join(OPS)}")
    return ops


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _common(p: argparse.ArgumentParser, *, backend=True) -> None:
    if backend:
        p.add_argument("--backend", type=_backend_name, default=_env("backend", "vectorized"))
    p.add_argument("--workers", type=_positive_int, default=_env("workers"))
    p.add_argument("--memory-budget", type=_parse_bytes, default=_env("memory_budget"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvquant", description="Per-channel INT8 KV-cache quantization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a seeded uniform[-1,1) fp32 matrix")
    p.add_argument("rows", type=int)
    p.add_argument("cols", type=int)
    p.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    p.add_argument("--out", required=_env("out") is None, default=_env("out"))

    for name, helptext in (("quantize", "fp32 file -> quantized cache file"), ("dequantize", "quantized cache file -> fp32 file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("input")
        p.add_argument("--out", required=_env("out") is None, default=_env("out"))
        p.add_argument("--verify", action="store_true", default=_env_bool("verify"))
        _common(p)

    p = sub.add_parser("bench", help="run the benchmark test matrix")
    p.add_argument("--scale-factor", type=float, default=float(_env("scale_factor", 0.05)))
    p.add_argument("--backends", type=_backend_list, default=_backend_list(_env("backends", ",".join(b.value for b in BackendId))))
    p.add_argument("--ops", type=_op_list, default=_op_list(_env("ops", ",".join(OPS))))
    p.add_argument("--format", choices=("csv", "json"), default=_env("format", "csv"))
    p.add_argument("--out", default=_env("out"), help="report path (default: standard output)")
    p.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    p.add_argument("--warmup-runs", type=int, default=int(_env("warmup_runs", 2)))
    p.add_argument("--timed-runs", type=_positive_int, default=int(_env("timed_runs", 5)))
    p.add_argument("--no-probe", action="store_true", help="skip error metrics")
    p.add_argument("--probe-queries", type=_positive_int, default=32)
    p.add_argument("--probe-rows", type=_positive_int, default=4096)
    p.add_argument("--configs", help="comma-separated subset of config names")
    _common(p, backend=False)

    p = sub.add_parser("validate", help="run the correctness battery")
    p.add_argument("--categories", default=_env("categories"), help=f"comma-separated subset of {','.join(CATEGORIES)}")
    p.add_argument("--json", dest="json_path", default=_env("json"))

    p = sub.add_parser("estimate", help="KV-cache memory estimate")
    p.add_argument("--layers", type=_positive_int, default=32)
    p.add_argument("--heads", type=_positive_int, default=32)
    p.add_argument("--head-dim", type=_positive_int, default=128)
    p.add_argument("--seq-len", type=_positive_int, default=131072)
    p.add_argument("--precision", choices=tuple(PRECISION_BYTES), default=_env("precision", "fp32"))
    return parser


def _budget(args) -> int:
    return args.memory_budget if args.memory_budget else default_memory_budget()


def _read(path: str):
    try:
        return fileformat.read_file(path)
    except FormatError as exc:
        raise FormatError(exc.field, f"{exc.detail} in {path}") from None


def _check_file_budget(path: str, args) -> None:
    size = Path(path).stat().st_size
    need = (size * _FILE_BYTES_PER_ELEMENT) // 4
    budget = _budget(args)
    if need > budget:
        raise ResourceError(f"{path}: needs ~{need / 1e9:.2f} GB, budget is {budget / 1e9:.2f} GB")


def cmd_gen(args) -> int:
    K = make_fp32(args.rows, args.cols, RngSpec(args.seed))
    n = fileformat.write_file(K, args.out)
    print(f"wrote {args.out}: {K.rows}x{K.cols} fp32, {n} bytes, seed {args.seed}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    _check_file_budget(args.input, args)
    K = _read(args.input)
    if not isinstance(K, Fp32Matrix):
        raise FormatError("dtype", f"expected an fp32 matrix in {args.input}")
    cache = quantize_cache(K, args.backend, args.workers)
    if args.verify and not cache == quantize_cache(K, BackendId.SCALAR_REF):
        raise VerificationError(f"{args.backend} output differs from scalar-ref")
    fileformat.write_file(cache, args.out)
    ratio = K.nbytes / cache.q.nbytes
    print(f"rows={K.rows} cols={K.cols} backend={args.backend}")
    print(f"fp32 payload {K.nbytes} B -> int8 payload {cache.q.nbytes} B + scales {K.cols * 4} B")
    print(f"compression ratio {ratio:.1f}")
    print(f"theoretical max error {theoretical_max_error(cache.scales):.9g}")
    return EXIT_OK


def cmd_dequantize(args) -> int:
    _check_file_budget(args.input, args)
    cache = _read(args.input)
    if not isinstance(cache, QuantizedCache):
        raise FormatError("dtype", f"expected quantized cache in {args.input}, found {type(cache).__name__}")
    K_hat = dequantize_cache(cache, args.backend, args.workers)
    if args.verify and not K_hat == dequantize_cache(cache, BackendId.SCALAR_REF):
        raise VerificationError(f"{args.backend} output differs from scalar-ref")
    fileformat.write_file(K_hat, args.out)
    print(f"rows={K_hat.rows} cols={K_hat.cols} backend={args.backend}")
    print(f"wrote {args.out}: fp32 payload {K_hat.nbytes} B")
    return EXIT_OK


def cmd_bench(args) -> int:
    probe = None if args.no_probe else AttentionProbeSpec(args.probe_queries, args.probe_rows, args.seed)
    try:
        matrix = default_test_matrix(
            args.scale_factor,
            backends=args.backends,
            ops=args.ops,
            warmup_runs=args.warmup_runs,
            timed_runs=args.timed_runs,
            seed=args.seed,
            probe=probe,
        )
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if args.configs:
        wanted = [c.strip() for c in args.configs.split(",")]
        try:
            matrix = type(matrix)(tuple(matrix[name] for name in wanted))
        except KeyError as exc:
            raise UsageError(f"unknown config {exc.args[0]!r}") from None
    records = run_bench(matrix, workers=args.workers, memory_budget=_budget(args))
    text = emit_report(records, args.format, args.out, meta=report_meta(matrix))
    table = summary_table(records)
    if args.out is None:
        sys.stdout.write(text)
        print(table, file=sys.stderr)
    else:
        print(table)
        print(f"\nreport: {args.out} ({len(records)} records, {args.format}); data uniform[-1,1), splitmix64")
    return EXIT_OK


def cmd_validate(args) -> int:
    cats = None
    if args.categories:
        cats = [c.strip() for c in args.categories.split(",") if c.strip()]
        bad = sorted(set(cats) - set(CATEGORIES))
        if bad:
            raise UsageError(f"unknown categories {bad}; valid: {', '.join(CATEGORIES)}")

    def show(case, failure):
        status = "PASS" if failure is None else "FAIL"
        line = f"{status}  {case.category}/{case.name}"
        print(line if failure is None else f"{line}: {failure}")

    result = run_suite(cats, on_result=show)
    print(f"\n{result.passed}/{result.total} passed")
    if args.json_path:
        Path(args.json_path).write_text(result.to_json())
    return EXIT_OK if result.ok else EXIT_VALIDATION


def cmd_estimate(args) -> int:
    nbytes = estimate_kv_bytes(args.layers, args.heads, args.head_dim, args.seq_len, PRECISION_BYTES[args.precision])
    int8 = estimate_kv_bytes(args.layers, args.heads, args.head_dim, args.seq_len, 1)
    print(
        f"layers={args.layers} heads={args.heads} head_dim={args.head_dim} seq_len={args.seq_len}"
    )
    print(f"{args.precision}: {nbytes:,} bytes ({decimal_gb(nbytes):.1f} GB)")
    print(f"int8: {int8:,} bytes ({decimal_gb(int8):.1f} GB)")
    print(f"ratio {args.precision}/int8: {nbytes / int8:.1f}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "bench": cmd_bench,
    "validate": cmd_validate,
    "estimate": cmd_estimate,
}


def main(argv=None) -> int:
    warnings.filterwarnings("ignore", message=".*TBB.*")
    try:
        parser = build_parser()
    except (argparse.ArgumentTypeError, ValueError) as exc:
        print(f"kvquant: bad environment override: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DimensionError, ConfigurationError, KVOverflowError) as exc:
        print(f"kvquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"kvquant: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ResourceError as exc:
        print(f"kvquant: resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except VerificationError as exc:
        print(f"kvquant: verification failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"kvquant: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
