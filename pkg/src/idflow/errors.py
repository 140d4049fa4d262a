"""Exception types shared across the package."""


class IdflowError(Exception):
    """Base class for all package errors."""


class DimensionError(IdflowError, ValueError):
    """Tensor extents do not line up."""


class DomainError(IdflowError, ValueError):
    """A scalar argument is outside the domain of a schedule or operator."""


class DegenerateVectorError(IdflowError, ValueError):
    """A vector with zero norm was given where a direction is required."""


class ConfigurationError(IdflowError, ValueError):
    """Invalid configuration (counts, head layout, presets)."""


class FusionError(IdflowError, ValueError):
    """Variants cannot be fused (shape mismatch or bad coefficients)."""


class EvaluationError(IdflowError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class DivergenceError(IdflowError, ArithmeticError):
    """Training or sampling produced a non-finite state."""

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


class FormatError(IdflowError, ValueError):
    """An on-disk artifact is malformed or has an unsupported version."""


class MismatchError(IdflowError, ValueError):
    """Two artifacts that must belong together (generations, dataset) do not."""
