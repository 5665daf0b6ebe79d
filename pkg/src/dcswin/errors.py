"""Exception types shared across the package."""


class DcswinError(Exception):
    """Base class for all package errors."""


class ShapeError(DcswinError, ValueError):
    """Operands have incompatible shapes; message names both."""


class ConfigError(DcswinError, ValueError):
    """A configuration value violates a documented constraint."""


class NumericsError(DcswinError, ArithmeticError):
    """NaN or Inf produced at an op boundary while checked mode is on."""


class TapeError(DcswinError, RuntimeError):
    """Misuse of the autodiff tape (double backward, missing graph, ...)."""


class FormatError(DcswinError, ValueError):
    """Malformed serialized data; message carries a byte offset when known."""


class MetricUndefinedError(DcswinError, ValueError):
    """A metric has no defined value for the given inputs."""
