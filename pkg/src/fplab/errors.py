"""Exception types raised across fplab."""


class BasisMismatchError(ValueError):
    """Coefficients were combined with a basis or spectrum they do not belong to."""


class AliasingError(ValueError):
    """A quadrature grid is too coarse to integrate the requested product exactly."""


class NumericalBlowUp(RuntimeError):
    """A trajectory produced NaN/Inf or left the configured ceiling."""

    def __init__(self, message, time=None, paths=None):
        super().__init__(message)
        self.time = time
        self.paths = paths


class CalibrationError(RuntimeError):
    """No grid value of lambda met the calibration threshold."""


class DivergentMomentError(ArithmeticError):
    """Exponential moment numerically divergent (the log-sum-exp overflowed)."""


class ConfigError(ValueError):
    """Experiment configuration violates one or more hypotheses."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
