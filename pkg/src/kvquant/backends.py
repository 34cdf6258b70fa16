"""Quantize / dequantize kernels behind a uniform backend interface.

Every backend evaluates the same per-element expressions::

    q    = clamp(rint(x / s), -127, 127)    (0 when s == 0)
    xhat = float32(q) * s

in float32 with round-half-to-even, so outputs are bit-identical across
backends. The backends differ only in how the ``T x D`` iteration space is
split into work:

``scalar-ref``      single-threaded row-major double loop
``parallel-naive``  one work item per element, rows spread over workers
``blocked``         row tiles x column blocks, block scales staged locally
``coarsened``       one column stripe per worker, scales hoisted once
``vectorized``      4-column lane groups plus a scalar tail

Only ``vectorized`` is compiled with LLVM's loop and SLP vectorizers enabled;
the other four are compiled with both disabled so that they really execute
one element per instruction (``lane_width == 1``).
"""

from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Union

import numba
import numpy as np
from numba.core import config as numba_config

from ._parallel import resolve_workers, threads
from .errors import ConfigurationError, DimensionError
from .scaler import scales_par_kernel, scales_ref_kernel
from .tensor import Fp32Matrix, Int8Matrix, QuantizedCache, ScaleVector

_HI = np.float32(127.0)
_LO = np.float32(-127.0)

BLOCK_ROWS = 32
BLOCK_COLS = 256
LANES = 4


class BackendId(str, enum.Enum):
    SCALAR_REF = "scalar-ref"
    PARALLEL_NAIVE = "parallel-naive"
    BLOCKED = "blocked"
    COARSENED = "coarsened"
    VECTORIZED = "vectorized"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class BackendDescriptor:
    id: BackendId
    description: str
    lane_width: int = 1
    supports_any_cols: bool = True


# -- element operations -----------------------------------------------------


@numba.njit(inline="always")
def _q1(x, s):
    if s == 0.0:
        return np.int8(0)
    v = np.rint(x / s)
    if v > _HI:
        v = _HI
    elif v < _LO:
        v = _LO
    return np.int8(v)


@numba.njit(inline="always")
def _dq1(q, s):
    return np.float32(q) * s


# -- scalar reference -------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _quant_scalar(K, s, out, nwork):
    T, D = K.shape
    for t in range(T):
        for d in range(D):
            out[t, d] = _q1(K[t, d], s[d])


@numba.njit(cache=True, nogil=True)
def _dequant_scalar(Q, s, out, nwork):
    T, D = Q.shape
    for t in range(T):
        for d in range(D):
            out[t, d] = _dq1(Q[t, d], s[d])


# -- element-parallel -------------------------------------------------------


@numba.njit(cache=True, parallel=True)
def _quant_naive(K, s, out, nwork):
    T, D = K.shape
    for t in numba.prange(T):
        for d in range(D):
            out[t, d] = _q1(K[t, d], s[d])


@numba.njit(cache=True, parallel=True)
def _dequant_naive(Q, s, out, nwork):
    T, D = Q.shape
    for t in numba.prange(T):
        for d in range(D):
            out[t, d] = _dq1(Q[t, d], s[d])


# -- cache-blocked ----------------------------------------------------------


@numba.njit(cache=True, parallel=True)
def _quant_blocked(K, s, out, nwork):
    T, D = K.shape
    ntiles = (T + BLOCK_ROWS - 1) // BLOCK_ROWS
    for tile in numba.prange(ntiles):
        t0 = tile * BLOCK_ROWS
        t1 = min(T, t0 + BLOCK_ROWS)
        local = np.empty(BLOCK_COLS, dtype=np.float32)
        for c0 in range(0, D, BLOCK_COLS):
            c1 = min(D, c0 + BLOCK_COLS)
            for j in range(c1 - c0):
                local[j] = s[c0 + j]
            for t in range(t0, t1):
                for d in range(c0, c1):
                    out[t, d] = _q1(K[t, d], local[d - c0])


@numba.njit(cache=True, parallel=True)
def _dequant_blocked(Q, s, out, nwork):
    T, D = Q.shape
    ntiles = (T + BLOCK_ROWS - 1) // BLOCK_ROWS
    for tile in numba.prange(ntiles):
        t0 = tile * BLOCK_ROWS
        t1 = min(T, t0 + BLOCK_ROWS)
        local = np.empty(BLOCK_COLS, dtype=np.float32)
        for c0 in range(0, D, BLOCK_COLS):
            c1 = min(D, c0 + BLOCK_COLS)
            for j in range(c1 - c0):
                local[j] = s[c0 + j]
            for t in range(t0, t1):
                for d in range(c0, c1):
                    out[t, d] = _dq1(Q[t, d], local[d - c0])


# -- thread-coarsened -------------------------------------------------------


@numba.njit(cache=True, parallel=True)
def _quant_coarsened(K, s, out, nwork):
    T, D = K.shape
    width = (D + nwork - 1) // nwork
    for w in numba.prange(nwork):
        lo = w * width
        hi = min(D, lo + width)
        if lo >= hi:
            continue
        local = s[lo:hi].copy()
        for t in range(T):
            for d in range(lo, hi):
                out[t, d] = _q1(K[t, d], local[d - lo])


@numba.njit(cache=True, parallel=True)
def _dequant_coarsened(Q, s, out, nwork):
    T, D = Q.shape
    width = (D + nwork - 1) // nwork
    for w in numba.prange(nwork):
        lo = w * width
        hi = min(D, lo + width)
        if lo >= hi:
            continue
        local = s[lo:hi].copy()
        for t in range(T):
            for d in range(lo, hi):
                out[t, d] = _dq1(Q[t, d], local[d - lo])


# -- lane-vectorized --------------------------------------------------------


@numba.njit(cache=True, parallel=True)
def _quant_vectorized(K, s, out, nwork):
    T, D = K.shape
    D4 = D - D % LANES
    rows_per = (T + nwork - 1) // nwork
    for w in numba.prange(nwork):
        for t in range(w * rows_per, min(T, (w + 1) * rows_per)):
            # lane groups: the body is branch-light and contiguous so the
            # vectorizer packs LANES (or a multiple) columns per instruction
            for d in range(D4):
                out[t, d] = _q1(K[t, d], s[d])
            for d in range(D4, D):
                out[t, d] = _q1(K[t, d], s[d])


@numba.njit(cache=True, parallel=True)
def _dequant_vectorized(Q, s, out, nwork):
    T, D = Q.shape
    D4 = D - D % LANES
    rows_per = (T + nwork - 1) // nwork
    for w in numba.prange(nwork):
        for t in range(w * rows_per, min(T, (w + 1) * rows_per)):
            for d in range(D4):
                out[t, d] = _dq1(Q[t, d], s[d])
            for d in range(D4, D):
                out[t, d] = _dq1(Q[t, d], s[d])


# -- registry ---------------------------------------------------------------


def _scales_seq(K, out, nwork):
    scales_ref_kernel(K, out)


_compile_lock = threading.RLock()


@contextmanager
def _codegen(simd: bool):
    # numba reads these flags when it lowers a new specialization, and the
    # on-disk cache keeps whatever machine code was produced under them
    saved = numba_config.LOOP_VECTORIZE, numba_config.SLP_VECTORIZE
    if not simd:
        numba_config.LOOP_VECTORIZE = numba_config.SLP_VECTORIZE = False
    try:
        yield
    finally:
        numba_config.LOOP_VECTORIZE, numba_config.SLP_VECTORIZE = saved


def _ensure_compiled(kernel, args: tuple, simd: bool) -> None:
    if not hasattr(kernel, "overloads"):
        return  # plain Python kernel, e.g. a test double
    sig = tuple(numba.typeof(a) for a in args)
    if sig in kernel.overloads:
        return
    with _compile_lock:
        if sig not in kernel.overloads:
            with _codegen(simd):
                kernel.compile(sig)


_Kernel = Callable[[np.ndarray, np.ndarray, np.ndarray, int], None]


@dataclass(frozen=True)
class Backend:
    """A descriptor plus the three raw-array kernels it dispatches to.

    The ``*_into`` methods write into caller-provided buffers and skip all
    validation; the benchmark harness uses them to time kernels alone.
    """

    descriptor: BackendDescriptor
    quant_kernel: _Kernel
    dequant_kernel: _Kernel
    scales_kernel: Callable[[np.ndarray, np.ndarray, int], None] = scales_par_kernel
    parallel: bool = True
    simd: bool = False

    @property
    def name(self) -> str:
        return str(self.descriptor.id)

    def quantize_into(self, K, s, out, workers=None) -> None:
        self._run(self.quant_kernel, (K, s, out), workers)

    def dequantize_into(self, Q, s, out, workers=None) -> None:
        self._run(self.dequant_kernel, (Q, s, out), workers)

    def scales_into(self, K, out, workers=None) -> None:
        self._run(self.scales_kernel, (K, out), workers)

    def _run(self, kernel, args, workers):
        n = resolve_workers(workers) if self.parallel else 1
        if kernel is not self.scales_kernel:
            _ensure_compiled(kernel, args + (n,), self.simd)
        with threads(n):
            kernel(*args, n)


_BACKENDS: dict[BackendId, Backend] = {
    b.descriptor.id: b
    for b in (
        Backend(
            BackendDescriptor(BackendId.SCALAR_REF, "single-threaded row-major double loop"),
            _quant_scalar,
            _dequant_scalar,
            _scales_seq,
            parallel=False,
        ),
        Backend(
            BackendDescriptor(
                BackendId.PARALLEL_NAIVE,
                "one work item per element, rows partitioned across workers",
            ),
            _quant_naive,
            _dequant_naive,
        ),
        Backend(
            BackendDescriptor(
                BackendId.BLOCKED,
                f"{BLOCK_ROWS}-row tiles x {BLOCK_COLS}-column blocks, scales staged per block",
            ),
            _quant_blocked,
            _dequant_blocked,
        ),
        Backend(
            BackendDescriptor(
                BackendId.COARSENED,
                "one column stripe per worker, scales hoisted, all rows streamed",
            ),
            _quant_coarsened,
            _dequant_coarsened,
        ),
        Backend(
            BackendDescriptor(
                BackendId.VECTORIZED,
                f"{LANES}-column SIMD lane groups with scalar tail, row stripes per worker",
                lane_width=LANES,
            ),
            _quant_vectorized,
            _dequant_vectorized,
            simd=True,
        ),
    )
}

BackendLike = Union[str, BackendId, Backend]


def list_backends() -> list[BackendDescriptor]:
    """All registered backend descriptors, in fixed order."""
    return [b.descriptor for b in _BACKENDS.values()]


def get_backend(backend: BackendLike) -> Backend:
    if isinstance(backend, Backend):
        return backend
    try:
        return _BACKENDS[BackendId(backend)]
    except ValueError:
        valid = ", ".join(b.value for b in BackendId)
        raise ConfigurationError(f"unknown backend {backend!r}; valid: {valid}") from None


def _check_scales(cols: int, scales: ScaleVector) -> None:
    if len(scales) != cols:
        raise DimensionError(f"{len(scales)} scales for a matrix with {cols} columns")


def quantize(
    K: Fp32Matrix,
    scales: ScaleVector,
    backend: BackendLike = BackendId.VECTORIZED,
    workers: int | None = None,
) -> Int8Matrix:
    """Map each element to ``clamp(rint(K / s), -127, 127)``; zero scales give 0."""
    _check_scales(K.cols, scales)
    impl = get_backend(backend)
    out = np.empty(K.shape, dtype=np.int8)
    impl.quantize_into(K.data, scales.scales, out, workers)
    return Int8Matrix(out)


def dequantize(
    Q: Int8Matrix,
    scales: ScaleVector,
    backend: BackendLike = BackendId.VECTORIZED,
    workers: int | None = None,
) -> Fp32Matrix:
    """Reconstruct ``float32(Q) * s`` column by column."""
    _check_scales(Q.cols, scales)
    impl = get_backend(backend)
    out = np.empty(Q.shape, dtype=np.float32)
    impl.dequantize_into(Q.data, scales.scales, out, workers)
    return Fp32Matrix(out)


def quantize_cache(
    K: Fp32Matrix,
    backend: BackendLike = BackendId.VECTORIZED,
    workers: int | None = None,
) -> QuantizedCache:
    impl = get_backend(backend)
    s = np.empty(K.cols, dtype=np.float32)
    impl.scales_into(K.data, s, workers)
    scales = ScaleVector(s)
    return QuantizedCache(quantize(K, scales, impl, workers), scales)


def dequantize_cache(
    cache: QuantizedCache,
    backend: BackendLike = BackendId.VECTORIZED,
    workers: int | None = None,
) -> Fp32Matrix:
    return dequantize(cache.q, cache.scales, backend, workers)


def roundtrip(
    K: Fp32Matrix,
    backend: BackendLike = BackendId.VECTORIZED,
    workers: int | None = None,
) -> Fp32Matrix:
    """Quantize then dequantize ``K``; the result sits on the int8 lattice."""
    return dequantize_cache(quantize_cache(K, backend, workers), backend, workers)
