"""Exception types shared across the package.

The CLI maps :class:`ValidationError` (and subclasses) to exit code 1 and
:class:`NumericalError` to exit code 2.
"""
from .tensor import ContractError, DimensionError, NumericalError


class ValidationError(ValueError):
    pass


class ConfigError(ValidationError):
    pass


class RegistryError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    pass


__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "NumericalError",
    "RegistryError",
    "UndefinedMetricError",
    "ValidationError",
]
