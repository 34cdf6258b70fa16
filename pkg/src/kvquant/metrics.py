"""Reconstruction and attention-score error metrics.

All reductions accumulate in float64. Row partials are computed per row and
then summed with numpy's pairwise sum, which keeps results bit-stable for any
thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .backends import dequantize_cache
from .errors import DimensionError
from .tensor import Fp32Matrix, QuantizedCache, RngSpec, ScaleVector, uniform_fill

# rows per matmul block in attention_error; bounds the float64 temporaries
_ATTN_BLOCK_ROWS = 512


@dataclass(frozen=True)
class ErrorReport:
    l2: float
    max_abs: float
    theoretical_max: float
    attention_mean_abs: Optional[float] = None


@dataclass(frozen=True)
class AttentionProbeSpec:
    """How query vectors for the attention surrogate are drawn."""

    num_queries: int = 32
    max_rows: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.max_rows < 1:
            raise ValueError("max_rows must be >= 1")

    def queries(self, dim: int) -> np.ndarray:
        """``num_queries x dim`` uniform[-1, 1) queries, fixed by ``seed``."""
        return uniform_fill(self.num_queries, dim, RngSpec(self.seed, -1.0, 1.0))


def _same_shape(A: Fp32Matrix, B: Fp32Matrix) -> None:
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch: {A.shape} vs {B.shape}")


@numba.njit(cache=True, parallel=True)
def _row_sq_and_max(A, B, sq, mx):
    T, D = A.shape
    for t in numba.prange(T):
        acc = 0.0
        m = 0.0
        for d in range(D):
            diff = np.float64(A[t, d]) - np.float64(B[t, d])
            acc += diff * diff
            a = abs(diff)
            if a > m:
                m = a
        sq[t] = acc
        mx[t] = m


def _row_stats(A: Fp32Matrix, B: Fp32Matrix) -> tuple[np.ndarray, np.ndarray]:
    _same_shape(A, B)
    sq = np.empty(A.rows, dtype=np.float64)
    mx = np.empty(A.rows, dtype=np.float64)
    _row_sq_and_max(A.data, B.data, sq, mx)
    return sq, mx


def l2_error(A: Fp32Matrix, B: Fp32Matrix) -> float:
    """Frobenius norm of ``A - B``."""
    sq, _ = _row_stats(A, B)
    return math.sqrt(float(np.sum(sq)))


def max_abs_error(A: Fp32Matrix, B: Fp32Matrix) -> float:
    _, mx = _row_stats(A, B)
    return float(mx.max())


def attention_error(
    K: Fp32Matrix,
    K_hat: Fp32Matrix,
    probe: AttentionProbeSpec = AttentionProbeSpec(),
    queries: Optional[np.ndarray] = None,
) -> float:
    """Mean ``|q . K[t] - q . K_hat[t]|`` over queries and key rows.

    Dot products are raw (no ``1/sqrt(d)`` factor). Only the first
    ``probe.max_rows`` key rows are used. ``queries`` overrides the probe's
    generated queries and must have shape ``(n, K.cols)``.
    """
    _same_shape(K, K_hat)
    if queries is None:
        q = probe.queries(K.cols).astype(np.float64)
    else:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != K.cols:
            raise DimensionError(f"queries have length {q.shape[1]}, keys {K.cols}")
    rows = min(K.rows, probe.max_rows)
    total = 0.0
    for r0 in range(0, rows, _ATTN_BLOCK_ROWS):
        r1 = min(rows, r0 + _ATTN_BLOCK_ROWS)
        diff = K.data[r0:r1].astype(np.float64) - K_hat.data[r0:r1]
        total += float(np.abs(q @ diff.T).sum())
    return total / (q.shape[0] * rows)


def theoretical_max_error(scales: ScaleVector) -> float:
    """Half the widest quantization step, ``max_d s_d / 2``."""
    return float(np.max(scales.scales)) / 2.0


def error_report(
    K: Fp32Matrix,
    cache: QuantizedCache,
    probe: Optional[AttentionProbeSpec] = None,
    reconstruction: Optional[Fp32Matrix] = None,
) -> ErrorReport:
    """Bundle all metrics of ``K`` against ``dequantize(cache)``.

    Pass ``reconstruction`` to reuse an already dequantized matrix.
    """
    K_hat = reconstruction if reconstruction is not None else dequantize_cache(cache)
    _same_shape(K, K_hat)
    sq, mx = _row_stats(K, K_hat)
    attn = attention_error(K, K_hat, probe) if probe is not None else None
    return ErrorReport(
        l2=math.sqrt(float(np.sum(sq))),
        max_abs=float(mx.max()),
        theoretical_max=theoretical_max_error(cache.scales),
        attention_mean_abs=attn,
    )
