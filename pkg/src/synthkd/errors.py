"""Exception types shared across the package."""


class SynthKDError(Exception):
    """Base class for all package errors."""


class ShapeError(SynthKDError, ValueError):
    """Operands have incompatible shapes."""


class TapeError(SynthKDError, RuntimeError):
    """Misuse of the gradient tape (detached graph, repeated backward, ...)."""


class NumericalError(SynthKDError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(SynthKDError, ValueError):
    """Invalid configuration or argument value."""


class FormatError(SynthKDError, ValueError):
    """Malformed file contents (bad magic, truncated payload, ...)."""


class VersionError(FormatError):
    """File format version is not supported by this reader."""


class DigestError(FormatError):
    """Stored digest does not match the payload."""
