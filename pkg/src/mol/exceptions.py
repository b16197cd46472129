"""Exception hierarchy shared across the package."""


class MOLError(Exception):
    """Base class for all library errors."""


class DimensionError(MOLError, ValueError):
    """Array shape does not match what an operator or network expects."""


class ParameterError(MOLError, ValueError):
    """A scalar or configuration parameter is outside its admissible range."""


class SolverError(MOLError, RuntimeError):
    """An inner linear solve failed to reach its tolerance.

    Attributes
    ----------
    residual : float
        Relative residual at the last iteration.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericError(MOLError, FloatingPointError):
    """An iterate became non-finite."""

    def __init__(self, message, iteration=-1):
        super().__init__(message)
        self.iteration = iteration


class ConvergenceError(MOLError, RuntimeError):
    """A fixed-point or Jacobian iteration exhausted its iteration cap."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(MOLError, ValueError):
    """Experiment configuration could not be parsed."""
