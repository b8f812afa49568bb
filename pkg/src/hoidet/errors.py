"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A hyperparameter or option violates its documented constraints."""


class ContractError(ValueError):
    """An input violates a documented precondition (non-scalar loss,
    degenerate box, non-finite cost, ...)."""


class CapacityError(ValueError):
    """More ground truths than prediction slots."""


class DataError(ValueError):
    """A data record fails validation; the message names the record."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where the pipeline requires finite ones."""


class GenerationError(RuntimeError):
    """Synthetic scene generation could not satisfy the requested
    constraints within the retry budget."""
