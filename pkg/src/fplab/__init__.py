"""fplab: shifted-noise Galerkin simulation of Fokker-Planck equations on Hilbert spaces."""

__version__ = "0.1.0"

from .errors import (AliasingError, BasisMismatchError, CalibrationError, ConfigError,  # noqa: E402
                     DivergentMomentError, NumericalBlowUp)

__all__ = ["__version__", "AliasingError", "BasisMismatchError", "CalibrationError", "ConfigError",
           "DivergentMomentError", "NumericalBlowUp"]
