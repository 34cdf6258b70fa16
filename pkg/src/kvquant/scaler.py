"""Per-channel scale computation: ``s_d = max_t |K[t, d]| / 127``."""

from __future__ import annotations

import numba
import numpy as np

from ._parallel import resolve_workers, threads
from .tensor import Fp32Matrix, ScaleVector

_LEVELS = np.float32(127.0)


@numba.njit(cache=True, nogil=True)
def scales_ref_kernel(K, out):
    # column-outer double loop, the same traversal as the C reference
    T, D = K.shape
    for d in range(D):
        max_abs = np.float32(0.0)
        for t in range(T):
            val = abs(K[t, d])
            if val > max_abs:
                max_abs = val
        out[d] = max_abs / _LEVELS


@numba.njit(cache=True, parallel=True)
def scales_par_kernel(K, out, nstripes):
    # each stripe owns whole columns and scans them row-major
    T, D = K.shape
    width = (D + nstripes - 1) // nstripes
    for w in numba.prange(nstripes):
        lo = w * width
        hi = min(D, lo + width)
        if lo >= hi:
            continue
        acc = np.zeros(hi - lo, dtype=np.float32)
        for t in range(T):
            for d in range(lo, hi):
                val = abs(K[t, d])
                if val > acc[d - lo]:
                    acc[d - lo] = val
        for d in range(lo, hi):
            out[d] = acc[d - lo] / _LEVELS


def compute_scales_ref(K: Fp32Matrix) -> ScaleVector:
    """Sequential reference: one column at a time, float32 throughout."""
    out = np.empty(K.cols, dtype=np.float32)
    scales_ref_kernel(K.data, out)
    return ScaleVector(out)


def compute_scales_par(K: Fp32Matrix, workers: int | None = None) -> ScaleVector:
    """Column-partitioned parallel scales; bit-identical to the reference."""
    workers = resolve_workers(workers)
    out = np.empty(K.cols, dtype=np.float32)
    with threads(workers):
        scales_par_kernel(K.data, out, workers)
    return ScaleVector(out)
