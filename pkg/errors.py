"""
Exception hierarchy shared by the library, the CLI and the HTTP surface
"""
from typing import Optional


class RhcError(Exception):
    """Base error; `module` records where the failure originated."""

    exit_code = 1

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        self.module = module

    def __str__(self) -> str:
        message = super().__str__()
        return f"[{self.module}] {message}" if self.module else message


class ConfigError(RhcError, ValueError):
    exit_code = 2


class NumericalError(RhcError, RuntimeError):
    exit_code = 3


class PreconditionError(RhcError, ValueError):
    exit_code = 4


# Configuration problems
class GridError(ConfigError):
    pass


class FieldSpecError(ConfigError):
    pass


class ActuatorResolutionError(ConfigError):
    pass


# Numerical failures
class DirectSumError(NumericalError):
    """Cross-Gram matrix singular or too badly conditioned."""


class EigenSolverError(NumericalError):
    pass


class LinearSolveError(NumericalError):
    pass


class OcpNotConverged(NumericalError):
    def __init__(self, message: str, module: Optional[str] = None, partial=None):
        super().__init__(message, module)
        self.partial = partial


# Violated preconditions
class InsufficientActuatorsError(PreconditionError):
    pass


class AssumptionViolated(PreconditionError):
    pass


class KappaTooLarge(PreconditionError):
    pass
