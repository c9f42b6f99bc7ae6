"""
Typed failures raised by the synthesis library.

Tool functions in :mod:`tracking_funnels.tools` catch these and turn them
into ``{"status": "error"}`` dictionaries with a stable exit code.
"""

from typing import Any


class TrackingFunnelsError(Exception):
    """Base class for all library failures."""

    exit_code = 1


class StructuralError(TrackingFunnelsError, ValueError):
    """A malformed symbolic object: registry mismatch, bad degree, etc."""


class SolverRefusal(TrackingFunnelsError, RuntimeError):
    """Certificates were requested from a solution that is not optimal."""

    def __init__(self, message: str, status: str | None = None):
        super().__init__(message)
        self.status = status


class InitializationError(TrackingFunnelsError, RuntimeError):
    """The slack λ could not be driven to zero or below."""

    exit_code = 3

    def __init__(self, message: str, lambda_trace: list[float]):
        super().__init__(message)
        self.lambda_trace = list(lambda_trace)


class AlternationError(TrackingFunnelsError, RuntimeError):
    """No feasible iterate was produced by the alternation."""

    exit_code = 4

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class ArtifactError(TrackingFunnelsError, FileNotFoundError):
    """A required artifact is missing or unreadable."""

    exit_code = 2


class ConfigError(TrackingFunnelsError, ValueError):
    """A project configuration that cannot be read or validated."""

    exit_code = 2
