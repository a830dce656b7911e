"""Exception types shared across the package."""


class PrefixLabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PrefixLabError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(PrefixLabError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class DegenerateRowError(PrefixLabError, ArithmeticError):
    """A probability row lost all of its mass (fully masked / zero sum)."""


class ConfigError(PrefixLabError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(PrefixLabError, ValueError):
    """Invalid runtime input (out-of-vocabulary ids, empty corpus, ...)."""


class ParseError(PrefixLabError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NumericError(PrefixLabError, ArithmeticError):
    """A numeric routine failed (non-convergence, NaN, overflow)."""


class TrainingDivergedError(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
