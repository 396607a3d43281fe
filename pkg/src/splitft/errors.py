"""Exception hierarchy shared across the package.

Every error carries a stable machine-parsable ``code`` (its class name),
which the CLI prints as ``error[<code>]: <message>``.
"""


class SplitFTError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class DimensionError(SplitFTError):
    """Matrix or rank dimensions are incompatible."""


class RankMismatchError(SplitFTError):
    """Adapter ranks disagree where they must match."""


class ConfigError(SplitFTError):
    """Invalid model or experiment configuration."""


class RangeError(SplitFTError):
    """Layer range is invalid or does not match a cache."""


class DataError(SplitFTError):
    """Invalid dataset, shard, or target contents."""


class ProtocolError(SplitFTError):
    """Protocol state machine received an out-of-order or malformed message."""


class TransportError(SplitFTError):
    """Channel is closed or otherwise unusable."""


class CodecError(SplitFTError):
    """A frame could not be decoded (truncated or corrupt)."""


class IoError(SplitFTError):
    """File input/output failed."""
