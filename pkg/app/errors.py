from __future__ import annotations

from typing import Optional


class HypoflowError(Exception):
    """Base class for every failure raised by the lab."""


# ----------------------------
# Validation (CLI exit 1, HTTP 422)
# ----------------------------

class ConfigError(HypoflowError):
    pass


class IncompatibleEtaError(ConfigError):
    pass


class InvalidConstantError(ConfigError):
    pass


class DomainError(HypoflowError):
    pass


class TruncationError(DomainError):
    def __init__(self, message: str, suggested_rx: float, suggested_ry: float) -> None:
        super().__init__(f"{message} (suggested Rx={suggested_rx:.3g}, Ry={suggested_ry:.3g})")
        self.suggested_rx = suggested_rx
        self.suggested_ry = suggested_ry


class PositivityError(DomainError):
    pass


# ----------------------------
# Numerical failures (CLI exit 2, HTTP 500)
# ----------------------------

class NumericalError(HypoflowError):
    pass


class BlowUpError(NumericalError):
    def __init__(self, message: str, bound: str) -> None:
        super().__init__(f"{message}; violated bound: {bound}")
        self.bound = bound


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, iterations: Optional[int] = None) -> None:
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class QuadratureError(NumericalError):
    pass
