"""Exception hierarchy shared across the package."""


class KgmdError(Exception):
    """Base class for package errors."""


class StructuralError(KgmdError):
    """Shape, architecture, file-format or wiring mismatch."""


class NumericError(KgmdError):
    """Non-finite value detected during evaluation or time stepping.

    Carries the location (layer name or simulation time) in ``where``.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DataError(KgmdError):
    """Initial data incompatible with the periodic domain."""


class MetricError(KgmdError):
    """Metric undefined (zero denominator)."""


class ResolutionError(KgmdError):
    """Time step does not resolve the fast scale; carries the required dt."""

    def __init__(self, message, required_dt=None):
        super().__init__(message)
        self.required_dt = required_dt


class ConfigError(KgmdError):
    """Malformed or inconsistent run configuration."""
