"""Exception types raised by the package."""


class HFCalError(Exception):
    """Base class for all package errors."""


class DomainError(HFCalError, ValueError):
    """A point or argument lies outside the admissible domain."""


class BandError(HFCalError, ValueError):
    """A boundary pair falls inside the excluded diagonal band."""


class SolverError(HFCalError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


class NumericalError(HFCalError, ArithmeticError):
    """A quadrature or evaluation produced non-finite values."""


class ConfigError(HFCalError, ValueError):
    """Invalid scenario configuration."""


class MemoryBudgetError(HFCalError, MemoryError):
    """A requested discretization exceeds the configured memory budget."""


class ResolutionError(HFCalError, ValueError):
    """A discretization does not resolve the oscillation or the symbol decay."""
