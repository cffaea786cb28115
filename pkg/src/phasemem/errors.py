"""Exception hierarchy shared by all phasemem modules."""


class PhaseMemError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PhaseMemError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class DimensionError(PhaseMemError, ValueError):
    """Tensor shapes do not fit together."""


class InputError(PhaseMemError, ValueError):
    """A caller-supplied value is out of range or malformed."""


class NumericError(PhaseMemError, FloatingPointError):
    """NaN or infinite values where finite values are required."""


class UsageError(PhaseMemError, RuntimeError):
    """An API was called in the wrong state."""


class FormatError(PhaseMemError, IOError):
    """A file on disk is missing, truncated or corrupt.

    ``field`` names the offending path, header key or parameter.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class UnsupportedVersionError(FormatError):
    """A file declares a format version this build cannot read."""
