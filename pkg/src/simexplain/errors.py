"""Exception hierarchy shared by all simexplain modules."""


class SimExplainError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(SimExplainError):
    """An argument violates a documented precondition."""


class InvalidDataError(SimExplainError):
    """Numeric payload is unusable (NaN/Inf, out-of-range values)."""


class ParseError(SimExplainError):
    """A file does not conform to its on-disk schema. Message names the field."""


class IntegrityError(SimExplainError):
    """Cross-references inside a dataset are inconsistent (dangling ids etc.)."""


class UnsupportedError(SimExplainError):
    """The scorer lacks a capability required by the requested operation."""


class TransportError(SimExplainError):
    """Communication with an external scorer process failed."""


class ConvergenceError(SimExplainError):
    """An iterative solver hit its sweep budget before converging."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class OptimizationError(SimExplainError):
    """Gradient descent diverged. Carries the trailing loss trace."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)
