"""Worker-count resolution for the numba-parallel kernels."""

from __future__ import annotations

import os
from contextlib import contextmanager

import numba


def default_workers() -> int:
    return os.cpu_count() or 1


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        return default_workers()
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


@contextmanager
def threads(workers: int):
    """Run numba parallel regions on at most ``workers`` OS threads.

    The logical partition count is always ``workers``; only the thread pool is
    capped by ``NUMBA_NUM_THREADS``.
    """
    previous = numba.get_num_threads()
    numba.set_num_threads(max(1, min(workers, numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(previous)
