"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a plain failure.
"""


class CrossdenseError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossdenseError):
    """Tensor shapes are inconsistent with an operation's contract."""


class HyperparamError(CrossdenseError):
    """An operation hyperparameter (stride, padding, rate, ...) is invalid."""


class NumericError(CrossdenseError):
    """A numeric invariant broke: non-finite loss, degenerate batch stats."""


class ConfigError(CrossdenseError):
    """A run configuration failed validation."""


class DataError(CrossdenseError):
    """A dataset file is missing, truncated, or malformed."""


class CheckpointError(CrossdenseError):
    """A checkpoint file is malformed or incompatible with the model."""
