"""Per-channel symmetric INT8 quantization for transformer KV-cache matrices."""

from .backends import (
    Backend,
    BackendDescriptor,
    BackendId,
    dequantize,
    dequantize_cache,
    get_backend,
    list_backends,
    quantize,
    quantize_cache,
    roundtrip,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    KVOverflowError,
    KVQuantError,
    ResourceError,
)
from .fileformat import deserialize, read_file, serialize, write_file
from .metrics import (
    AttentionProbeSpec,
    ErrorReport,
    attention_error,
    error_report,
    l2_error,
    max_abs_error,
    theoretical_max_error,
)
from .scaler import compute_scales_par, compute_scales_ref
from .tensor import (
    Constant,
    Fp32Matrix,
    Int8Matrix,
    QuantizedCache,
    RngSpec,
    ScaleVector,
    estimate_kv_bytes,
    make_fp32,
)

__version__ = "0.1.0"
