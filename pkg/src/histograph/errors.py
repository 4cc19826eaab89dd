"""Exception types shared across the package."""


class HistographError(Exception):
    """Base class for all package errors."""


class ShapeError(HistographError, ValueError):
    """Operand shapes do not agree."""


class ContractError(HistographError, ValueError):
    """A precondition of an operation was violated."""


class EvaluationError(HistographError, ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


class ConfigError(HistographError, ValueError):
    """Invalid model or run configuration."""


class ParameterError(HistographError, ValueError):
    """Invalid generator parameters."""


class IngestionError(HistographError, ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class FormatError(HistographError, ValueError):
    """A binary cache or checkpoint file does not match the expected layout."""


class DivergenceError(HistographError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
