"""Exception hierarchy. Every error raised deliberately by the package derives
from :class:`HamlearnError`."""


class HamlearnError(Exception):
    pass


class ConfigurationError(HamlearnError, ValueError):
    """Invalid parameters, detected before any computation."""


class ContractError(HamlearnError, ValueError):
    """Inputs violate an operation's preconditions (shapes, lengths, bases)."""


class DegenerateGeometryError(HamlearnError, ValueError):
    pass


class SolverError(HamlearnError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegeneracyError(HamlearnError, RuntimeError):
    """Ground state is degenerate where a unique one is required."""


class UndefinedMetricError(HamlearnError, ValueError):
    pass


class TrainingDivergedError(HamlearnError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
