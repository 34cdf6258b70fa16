"""Named correctness battery, runnable from the CLI.

Categories: structural, identity, deterministic, backend, edge, stress.
Backends are compared to scalar-ref with exact equality; there is no +-1
tolerance because every backend uses the same rounding mode.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import fileformat
from .backends import Backend, BackendId, dequantize, get_backend, quantize, quantize_cache, roundtrip
from .errors import DimensionError, FormatError
from .metrics import AttentionProbeSpec, attention_error, l2_error, max_abs_error, theoretical_max_error
from .scaler import compute_scales_par, compute_scales_ref
from .tensor import Fp32Matrix, Int8Matrix, QuantizedCache, RngSpec, ScaleVector, make_fp32

CATEGORIES = ("structural", "identity", "deterministic", "backend", "edge", "stress")

EPS = 2.0**-20


class CheckFailed(AssertionError):
    pass


def check(cond: bool, message: str) -> None:
    if not cond:
        raise CheckFailed(message)


@dataclass
class SuiteResult:
    total: int = 0
    passed: int = 0
    failures: list = field(default_factory=list)  # (test name, message)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        doc = asdict(self)
        doc["failures"] = [{"test": n, "message": m} for n, m in self.failures]
        return json.dumps(doc, indent=2) + "\n"


@dataclass(frozen=True)
class Case:
    category: str
    name: str
    fn: Callable[[], None]


def suite_matrices() -> list[tuple[str, Fp32Matrix]]:
    """Every matrix the backend checks run on."""
    out = [
        ("1x1", make_fp32(1, 1, 0.75)),
        ("1x1-neg", Fp32Matrix([[-3.0]])),
        ("zeros", make_fp32(8, 6, "zeros")),
        ("ones", make_fp32(9, 8, "ones")),
        ("alternating", make_fp32(7, 9, "alternating-signs")),
        ("ties", Fp32Matrix([[127.0, 63.5, -63.5, 0.5], [-127.0, 1.5, -2.5, -0.5]])),
    ]
    for d in (1, 2, 3, 4, 5, 7, 8, 13, 127, 128, 257):
        out.append((f"rand-33x{d}", make_fp32(33, d, RngSpec(1000 + d))))
    mixed = make_fp32(65, 1027, RngSpec(77, -4.0, 4.0)).data.copy()
    mixed[:, ::3] *= np.float32(1e-3)
    mixed[:, 5] = 0.0
    out.append(("mixed-65x1027", Fp32Matrix(mixed)))
    return out


def _first_mismatch(got: np.ndarray, want: np.ndarray) -> Optional[tuple[int, int]]:
    bad = np.argwhere(got != want)
    return None if bad.size == 0 else (int(bad[0][0]), int(bad[0][1]))


def _compare_backend(candidate: Backend, reference: Backend) -> None:
    for label, K in suite_matrices():
        s_ref = compute_scales_ref(K)
        want_q = np.empty(K.shape, np.int8)
        reference.quantize_into(K.data, s_ref.scales, want_q)
        got_q = np.empty(K.shape, np.int8)
        candidate.quantize_into(K.data, s_ref.scales, got_q)
        at = _first_mismatch(got_q, want_q)
        check(
            at is None,
            f"{candidate.name} quantize differs from {reference.name} on {label} at {at}: "
            f"got {got_q[at] if at else None}, expected {want_q[at] if at else None}",
        )
        want_x = np.empty(K.shape, np.float32)
        reference.dequantize_into(want_q, s_ref.scales, want_x)
        got_x = np.empty(K.shape, np.float32)
        candidate.dequantize_into(want_q, s_ref.scales, got_x)
        at = _first_mismatch(got_x.view(np.uint32), want_x.view(np.uint32))
        check(
            at is None,
            f"{candidate.name} dequantize differs from {reference.name} on {label} at {at}: "
            f"got {got_x[at] if at else None}, expected {want_x[at] if at else None}",
        )


def _roundtrip_bound(K: Fp32Matrix, backend=BackendId.SCALAR_REF) -> None:
    cache = quantize_cache(K, backend)
    R = roundtrip(K, backend)
    err = np.abs(K.data.astype(np.float64) - R.data)
    limit = cache.scales.scales.astype(np.float64)[None, :] / 2 + EPS * np.maximum(1.0, np.abs(K.data))
    viol = np.argwhere(err > limit)
    check(viol.size == 0, f"error bound violated at {tuple(viol[0]) if viol.size else None}")


def _structural() -> list[Case]:
    def fp32_alloc():
        m = make_fp32(3, 5)
        check(m.shape == (3, 5) and m.data.dtype == np.float32, "fp32 shape/dtype")
        check(m.nbytes == 60 and not m.data.any(), "fp32 zero initialisation")

    def int8_alloc():
        q = Int8Matrix(np.zeros((3, 5), np.int8))
        check(q.shape == (3, 5) and q.nbytes * 4 == make_fp32(3, 5).nbytes, "int8 is 4x smaller")
        try:
            Int8Matrix(np.full((1, 1), -128, np.int8))
        except ValueError:
            pass
        else:
            raise CheckFailed("-128 accepted")

    def dims():
        for r, c in ((0, 4), (4, 0), (-1, 2)):
            try:
                make_fp32(r, c)
            except DimensionError:
                continue
            raise CheckFailed(f"{r}x{c} accepted")

    def rng_bounds():
        a = make_fp32(256, 256, RngSpec(42)).data
        check(a.min() >= -1.0 and a.max() < 1.0, "uniform[-1,1) out of bounds")
        b = make_fp32(64, 64, RngSpec(3, 2.0, 3.0)).data
        check(b.min() >= 2.0 and b.max() < 3.0, "uniform[2,3) out of bounds")

    def rng_determinism():
        a = make_fp32(4, 4, RngSpec(42))
        check(a == make_fp32(4, 4, RngSpec(42)), "same seed differs")
        check(not (a == make_fp32(4, 4, RngSpec(43))), "different seeds agree")

    def serialization():
        K = make_fp32(2, 3, RngSpec(9))
        blob = fileformat.serialize(K)
        check(len(blob) == 13 + 24, f"fp32 2x3 is {len(blob)} bytes")
        check(fileformat.serialize(fileformat.deserialize(blob)) == blob, "fp32 round trip")
        cache = quantize_cache(K)
        cblob = fileformat.serialize(cache)
        check(len(cblob) == 13 + 6 + 12, "cache size")
        check(fileformat.deserialize(cblob) == cache, "cache round trip")

    def format_errors():
        blob = fileformat.serialize(Int8Matrix(np.ones((2, 2), np.int8)))
        bad = bytearray(blob)
        bad[13] = 0x80
        for label, data, fieldname in (
            ("magic", b"XXXX" + blob[4:], "magic"),
            ("dtype", blob[:4] + b"\x07" + blob[5:], "dtype"),
            ("truncated", blob[:-1], "payload"),
            ("-128", bytes(bad), "payload"),
        ):
            try:
                fileformat.deserialize(data)
            except FormatError as exc:
                check(exc.field == fieldname, f"{label}: blamed {exc.field}")
            else:
                raise CheckFailed(f"{label} accepted")

    return [
        Case("structural", "fp32-allocation", fp32_alloc),
        Case("structural", "int8-allocation", int8_alloc),
        Case("structural", "dimension-errors", dims),
        Case("structural", "rng-bounds", rng_bounds),
        Case("structural", "rng-determinism", rng_determinism),
        Case("structural", "serialization-roundtrip", serialization),
        Case("structural", "format-errors", format_errors),
    ]


def _identity() -> list[Case]:
    K = make_fp32(64, 48, RngSpec(5))
    twin = Fp32Matrix(K.data.copy())

    def metric_zero(fn, *extra):
        def run():
            check(fn(K, K, *extra) == 0.0, f"{fn.__name__}(K, K) != 0")
            check(fn(K, twin, *extra) == 0.0, f"{fn.__name__}(K, copy) != 0")

        return run

    return [
        Case("identity", "l2-self", metric_zero(l2_error)),
        Case("identity", "max-abs-self", metric_zero(max_abs_error)),
        Case("identity", "attention-self", metric_zero(attention_error, AttentionProbeSpec(seed=1))),
    ]


def _deterministic() -> list[Case]:
    f = np.float32

    def scales_hand():
        s = compute_scales_ref(Fp32Matrix([[0.25, -0.75], [0.5, 0.6]])).scales
        check(s[0] == f(0.5) / f(127) and s[1] == f(0.75) / f(127), f"scales {s}")
        s = compute_scales_ref(Fp32Matrix([[1.0], [-0.5]])).scales
        check(s[0] == f(1.0) / f(127), f"scales {s}")

    def scales_zero():
        s = compute_scales_ref(make_fp32(2, 2)).scales
        check(not s.any(), f"zero column scales {s}")

    def scales_parallel():
        K = make_fp32(1024, 256, RngSpec(7))
        check(compute_scales_par(K, 8) == compute_scales_ref(K), "parallel scales differ")
        check(compute_scales_par(Fp32Matrix([[-3.0]]), 16).scales[0] == f(3.0) / f(127), "1x1 parallel")

    def rounding():
        K = Fp32Matrix([[127.0], [-127.0], [63.5], [-63.5], [0.5], [1.5]])
        q = quantize(K, ScaleVector([1.0]), BackendId.SCALAR_REF).data.ravel().tolist()
        check(q == [127, -127, 64, -64, 0, 2], f"half-to-even codes {q}")

    def clamp():
        q = quantize(Fp32Matrix([[200.0], [-1e6]]), ScaleVector([1.0]), BackendId.SCALAR_REF)
        check(q.data.ravel().tolist() == [127, -127], f"clamp {q.data.ravel()}")

    def dequant():
        s = f(1.0) / f(127)
        x = dequantize(Int8Matrix([[64, 0, 127]]), ScaleVector([s, 0.0123, 1.0]), BackendId.SCALAR_REF)
        check(x.data[0, 0] == f(64) * s and x.data[0, 1] == 0 and x.data[0, 2] == 127, f"dequant {x.data}")

    def cache_endpoints():
        c = quantize_cache(Fp32Matrix([[1.0], [-1.0]]), BackendId.SCALAR_REF)
        check(c.q.data.ravel().tolist() == [127, -127], "endpoints")
        R = roundtrip(Fp32Matrix([[1.0]]), BackendId.SCALAR_REF)
        check(abs(float(R.data[0, 0]) - 1.0) <= 1e-6, f"1.0 round trip {R.data[0, 0]}")

    def theoretical():
        check(abs(theoretical_max_error(ScaleVector([1 / 127])) - 1 / 254) < 1e-9, "1/254")
        check(theoretical_max_error(ScaleVector([0.0, 0.0])) == 0.0, "zero scales")
        check(abs(theoretical_max_error(ScaleVector([0.01, 0.03])) - 0.015) < 1e-9, "max/2")

    return [
        Case("deterministic", "scales-hand", scales_hand),
        Case("deterministic", "scales-zero-column", scales_zero),
        Case("deterministic", "scales-parallel-equals-ref", scales_parallel),
        Case("deterministic", "quantize-half-even", rounding),
        Case("deterministic", "quantize-clamp", clamp),
        Case("deterministic", "dequantize-hand", dequant),
        Case("deterministic", "cache-endpoints", cache_endpoints),
        Case("deterministic", "theoretical-max", theoretical),
    ]


def _backend(candidates: Sequence[Backend]) -> list[Case]:
    reference = get_backend(BackendId.SCALAR_REF)
    cases = [
        Case("backend", f"{b.name}-vs-scalar-ref", lambda b=b: _compare_backend(b, reference))
        for b in candidates
    ]

    def all_pairs():
        everyone = [reference, *candidates]
        for i, a in enumerate(everyone):
            for b in everyone[i + 1 :]:
                _compare_backend(b, a)

    cases.append(Case("backend", "cross-backend-consistency", all_pairs))
    return cases


def _edge(candidates: Sequence[Backend]) -> list[Case]:
    backends = [get_backend(BackendId.SCALAR_REF), *candidates]

    def on_all(K: Fp32Matrix, expect_q: Optional[np.ndarray] = None):
        for b in backends:
            c = quantize_cache(K, b)
            if expect_q is not None:
                at = _first_mismatch(c.q.data, expect_q)
                check(at is None, f"{b.name}: code {c.q.data[at] if at else None} at {at}")
            _roundtrip_bound(K, b)

    def one_by_one():
        on_all(Fp32Matrix([[-3.0]]), np.array([[-127]], np.int8))
        on_all(Fp32Matrix([[0.0]]), np.array([[0]], np.int8))

    def width4():
        on_all(make_fp32(16, 4, RngSpec(4)))

    def tails():
        for d in (5, 7):
            on_all(make_fp32(16, d, RngSpec(d)))

    def zeros():
        K = make_fp32(12, 10)
        on_all(K, np.zeros((12, 10), np.int8))
        check(roundtrip(K) == K, "zeros do not round-trip exactly")

    def ones():
        on_all(make_fp32(12, 10, "ones"), np.full((12, 10), 127, np.int8))

    def alternating():
        K = make_fp32(11, 9, "alternating-signs")
        on_all(K, (K.data * 127).astype(np.int8))

    return [
        Case("edge", "1x1", one_by_one),
        Case("edge", "min-vector-width", width4),
        Case("edge", "vector-tails-5-7", tails),
        Case("edge", "all-zeros", zeros),
        Case("edge", "all-ones", ones),
        Case("edge", "alternating-signs", alternating),
    ]


def _stress() -> list[Case]:
    cache_box = {}

    def big():
        if "K" not in cache_box:
            cache_box["K"] = make_fp32(4096, 512, RngSpec(2024))
        return cache_box["K"]

    def bound():
        _roundtrip_bound(big(), BackendId.VECTORIZED)

    def idempotent():
        R = roundtrip(big())
        check(roundtrip(R) == R, "roundtrip is not idempotent")

    def serial():
        cache = quantize_cache(big())
        check(fileformat.deserialize(fileformat.serialize(cache)) == cache, "cache round trip")
        check(fileformat.deserialize(fileformat.serialize(big())) == big(), "fp32 round trip")

    return [
        Case("stress", "error-bound-4096x512", bound),
        Case("stress", "idempotence-4096x512", idempotent),
        Case("stress", "serialization-4096x512", serial),
    ]


def battery(backends: Optional[Sequence[Backend]] = None) -> list[Case]:
    """All cases; ``backends`` replaces the optimized backends under test."""
    if backends is None:
        backends = [get_backend(b) for b in BackendId if b is not BackendId.SCALAR_REF]
    return [
        *_structural(),
        *_identity(),
        *_deterministic(),
        *_backend(backends),
        *_edge(backends),
        *_stress(),
    ]


def run_suite(
    categories: Optional[Iterable[str]] = None,
    backends: Optional[Sequence[Backend]] = None,
    on_result: Optional[Callable[[Case, Optional[str]], None]] = None,
) -> SuiteResult:
    """Run the battery, optionally restricted to some categories.

    Failures are collected, never raised.
    """
    selected = set(CATEGORIES if categories is None else categories)
    unknown = selected - set(CATEGORIES)
    if unknown:
        raise ValueError(f"unknown categories {sorted(unknown)}; valid: {', '.join(CATEGORIES)}")
    result = SuiteResult()
    for case in battery(backends):
        if case.category not in selected:
            continue
        result.total += 1
        try:
            case.fn()
        except Exception as exc:  # noqa: BLE001 - failures are data
            msg = str(exc) or type(exc).__name__
            result.failures.append((f"{case.category}/{case.name}", msg))
            if on_result:
                on_result(case, msg)
        else:
            result.passed += 1
            if on_result:
                on_result(case, None)
    return result
