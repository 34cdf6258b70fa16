"""Matrix types, deterministic fills, and KV-cache memory accounting.

All matrices are row-major ``T x D`` numpy arrays wrapped in small frozen
dataclasses. The wrapped array is a read-only view, so a constructed matrix
can be shared across worker threads without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numba
import numpy as np

from .errors import DimensionError, KVOverflowError

INT8_LIMIT = 127

_U64 = (1 << 64) - 1
_I64_MAX = (1 << 63) - 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@numba.njit(cache=True, nogil=True)
def _all_finite(flat):
    for i in range(flat.size):
        if not np.isfinite(flat[i]):
            return i
    return -1


def _check_dims(rows: int, cols: int) -> None:
    if int(rows) < 1 or int(cols) < 1:
        raise DimensionError(f"matrix dimensions must be >= 1, got {rows}x{cols}")


@dataclass(frozen=True, eq=False)
class Fp32Matrix:
    """Row-major float32 matrix holding K, a reconstruction, or queries."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got {arr.ndim}-D")
        _check_dims(*arr.shape)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        bad = _all_finite(arr.reshape(-1))
        if bad >= 0:
            t, d = divmod(int(bad), arr.shape[1])
            raise ValueError(f"non-finite value {arr[t, d]!r} at ({t}, {d})")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def __eq__(self, other):
        if not isinstance(other, Fp32Matrix):
            return NotImplemented
        # bit-level comparison so that 0.0 and -0.0 are distinguished
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Int8Matrix:
    """Row-major int8 matrix of quantization codes in [-127, 127]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got {arr.ndim}-D")
        _check_dims(*arr.shape)
        if arr.dtype != np.int8:
            if arr.size and (arr.min() < -INT8_LIMIT or arr.max() > INT8_LIMIT):
                raise ValueError("int8 codes must lie in [-127, 127]")
            arr = arr.astype(np.int8)
        arr = np.ascontiguousarray(arr)
        if arr.min() < -INT8_LIMIT:
            t, d = np.unravel_index(int(np.argmin(arr)), arr.shape)
            raise ValueError(f"int8 code -128 at ({t}, {d})")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def __eq__(self, other):
        if not isinstance(other, Int8Matrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScaleVector:
    """Per-column float32 scale factors, one per head dimension."""

    scales: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.scales, dtype=np.float32)
        if arr.ndim != 1 or arr.size < 1:
            raise DimensionError("scales must be a non-empty 1-D vector")
        if not np.isfinite(arr).all():
            raise ValueError("scales must be finite")
        if (arr < 0).any():
            raise ValueError("scales must be non-negative")
        object.__setattr__(self, "scales", _readonly(arr))

    def __len__(self) -> int:
        return self.scales.size

    def __eq__(self, other):
        if not isinstance(other, ScaleVector):
            return NotImplemented
        return len(self) == len(other) and np.array_equal(
            self.scales.view(np.uint32), other.scales.view(np.uint32)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedCache:
    """Int8 codes paired with the scales needed to reconstruct them."""

    q: Int8Matrix
    scales: ScaleVector

    def __post_init__(self):
        if len(self.scales) != self.q.cols:
            raise DimensionError(
                f"{len(self.scales)} scales for a matrix with {self.q.cols} columns"
            )

    def __eq__(self, other):
        if not isinstance(other, QuantizedCache):
            return NotImplemented
        return self.q == other.q and self.scales == other.scales

    __hash__ = None


@dataclass(frozen=True)
class RngSpec:
    """Seeded uniform fill over ``[low, high)``."""

    seed: int = 0
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _U64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not (np.isfinite(self.low) and np.isfinite(self.high)):
            raise ValueError("RNG bounds must be finite")
        if not self.low < self.high:
            raise ValueError(f"need low < high, got [{self.low}, {self.high})")


@dataclass(frozen=True)
class Constant:
    value: float = field(default=0.0)


Fill = Union[RngSpec, Constant, float, str]


@numba.njit(cache=True, parallel=True)
def _splitmix_fill(out, seed, low, span, top):
    # counter form of splitmix64: element i receives output i+1 of the
    # sequential generator started at state `seed`
    n = out.size
    for i in numba.prange(n):
        z = seed + (np.uint64(i) + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
        u = np.float64(z >> np.uint64(40)) * 5.9604644775390625e-08  # 2**-24
        v = np.float32(low + span * u)
        if v >= top:
            v = np.nextafter(top, np.float32(-np.inf))
        out[i] = v


def uniform_fill(rows: int, cols: int, spec: RngSpec) -> np.ndarray:
    """Return a fresh ``rows x cols`` float32 array drawn from ``spec``.

    The mapping from (seed, flat index) to value is fixed, so results are
    identical on every platform and for any thread count.
    """
    _check_dims(rows, cols)
    out = np.empty(int(rows) * int(cols), dtype=np.float32)
    _splitmix_fill(
        out,
        np.uint64(spec.seed),
        float(spec.low),
        float(spec.high) - float(spec.low),
        np.float32(spec.high),
    )
    return out.reshape(int(rows), int(cols))


def make_fp32(rows: int, cols: int, fill: Fill = "zeros") -> Fp32Matrix:
    """Build a matrix filled per ``fill``.

    ``fill`` is an :class:`RngSpec`, a :class:`Constant` (or plain float), or
    one of ``"zeros"``, ``"ones"``, ``"alternating-signs"``. Alternating signs
    is a +1/-1 checkerboard, so every row and every column alternates.
    """
    _check_dims(rows, cols)
    rows, cols = int(rows), int(cols)
    if isinstance(fill, RngSpec):
        return Fp32Matrix(uniform_fill(rows, cols, fill))
    if isinstance(fill, Constant):
        fill = fill.value
    if isinstance(fill, str):
        if fill == "zeros":
            return Fp32Matrix(np.zeros((rows, cols), dtype=np.float32))
        if fill == "ones":
            return Fp32Matrix(np.ones((rows, cols), dtype=np.float32))
        if fill == "alternating-signs":
            parity = np.add.outer(np.arange(rows), np.arange(cols)) % 2
            return Fp32Matrix((1 - 2 * parity).astype(np.float32))
        raise ValueError(f"unknown fill {fill!r}")
    value = float(fill)
    if not np.isfinite(value):
        raise ValueError("constant fill must be finite")
    return Fp32Matrix(np.full((rows, cols), value, dtype=np.float32))


def estimate_kv_bytes(
    layers: int, heads: int, head_dim: int, seq_len: int, bytes_per_elem: int
) -> int:
    """Bytes held by a KV cache: ``2 * L * H * d * T * bytes_per_elem``.

    Raises :class:`KVOverflowError` when the product leaves signed 64-bit range.
    """
    args = dict(
        layers=layers,
        heads=heads,
        head_dim=head_dim,
        seq_len=seq_len,
        bytes_per_elem=bytes_per_elem,
    )
    total = 2
    for name, value in args.items():
        if isinstance(value, bool) or int(value) != value or value < 1:
            raise DimensionError(f"{name} must be a positive integer, got {value!r}")
        total *= int(value)
        if total > _I64_MAX:
            raise KVOverflowError(f"KV cache size overflows 64 bits at {name}")
    return total


def decimal_gb(nbytes: int) -> float:
    return nbytes / 1e9
