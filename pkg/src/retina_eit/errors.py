"""Exception types shared across the package."""


class EitError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DimensionError(EitError, ValueError):
    kind = "dimension"


class ConfigError(EitError, ValueError):
    kind = "config"


class ContractError(EitError, RuntimeError):
    kind = "contract"


class GradAccumulationError(ContractError):
    kind = "grad-accumulation"


class NumericError(EitError, ArithmeticError):
    kind = "numeric"


class ValidationError(EitError, ValueError):
    kind = "validation"


class StateError(EitError, RuntimeError):
    kind = "state"


class CheckpointFormatError(EitError, ValueError):
    kind = "checkpoint-format"


class CheckpointVersionError(CheckpointFormatError):
    kind = "checkpoint-version"
