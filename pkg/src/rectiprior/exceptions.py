"""Exception hierarchy shared across the package."""


class RectipriorError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(RectipriorError, ValueError):
    """Invalid argument value (empty sample, bad fraction, nonpositive alpha, ...)."""


class OutcomeTypeError(RectipriorError, TypeError):
    """Outcome variant incompatible with the requested operation."""


class CapabilityError(RectipriorError):
    """Operation not supported for this loss or rectifier family."""


class RankDeficiencyError(RectipriorError):
    """A linear system required by a solver or estimator is singular."""


class ConvergenceError(RectipriorError):
    """Iterative solver failed to reach its tolerance within the iteration cap."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class IngestionError(RectipriorError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
