"""Toy identity-preserving flow-matching generator with decomposed Perceiver ID attention."""

from .errors import (ConfigurationError, DegenerateVectorError, DimensionError, DivergenceError,
                     DomainError, EvaluationError, FormatError, FusionError, IdflowError,
                     MismatchError)

__version__ = "0.1.0"
