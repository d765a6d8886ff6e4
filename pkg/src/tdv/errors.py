"""Exception taxonomy shared across the toolkit.

Every error that crosses a module boundary is one of these, so the CLI can
map failures to stable exit codes without string matching.
"""


class TdvError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TdvError):
    """Invalid configuration: unknown key, bad value, inconsistent fields."""


class FormatError(TdvError):
    """Malformed container, checkpoint, or image file."""


class NumericError(TdvError):
    """Non-finite values or mathematically undefined quantities."""


class SolverError(NumericError):
    """An iterative solver failed to reach its tolerance within its budget."""

    def __init__(self, message: str, residual: float | None = None,
                 iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
