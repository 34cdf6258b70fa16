"""Exception hierarchy shared by every kvquant module."""


class KVQuantError(Exception):
    """Base class for all errors raised by kvquant."""


class DimensionError(KVQuantError, ValueError):
    """A matrix shape is invalid or two shapes do not agree."""


class FormatError(KVQuantError, ValueError):
    """A KVQ1 byte stream is malformed.

    ``field`` names the header field or payload region that failed to parse.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.detail = message


class ConfigurationError(KVQuantError, ValueError):
    """Unknown backend, bad option value, or inconsistent configuration."""


class KVOverflowError(KVQuantError, OverflowError):
    """An integer result does not fit in signed 64-bit arithmetic."""


class ResourceError(KVQuantError):
    """A workload would exceed the configured memory budget."""
