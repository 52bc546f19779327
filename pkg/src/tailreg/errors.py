"""Exception types shared across the package.

The CLI maps each class to a process exit code, so library code should raise
the most specific one that applies.
"""


class TailRegError(Exception):
    """Base class for all package errors."""


class DomainError(TailRegError, ValueError):
    """An argument lies outside the support or parameter space."""


class ConfigError(TailRegError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(TailRegError, ValueError):
    """Malformed, missing or insufficient data."""


class ConvergenceError(TailRegError, RuntimeError):
    """An iterative solver failed to converge.

    ``trace`` holds whatever per-iteration record the solver kept, so callers
    can report how far it got.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
