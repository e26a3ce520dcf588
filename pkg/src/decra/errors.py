"""Exception types shared across the package."""


class DecraError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DecraError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(DecraError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ConfigError(DecraError, ValueError):
    """A configuration value is out of its valid range."""


class ParseError(DecraError, ValueError):
    """Input data could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class FormatError(DecraError, ValueError):
    """A checkpoint or other binary container is malformed."""


class NonFiniteError(DecraError, FloatingPointError):
    """A NaN or Inf appeared in a tensor value or gradient."""


class SubsetError(DecraError):
    """Training or evaluation failed on one subset of an experiment."""

    def __init__(self, message, subset):
        super().__init__(message)
        self.subset = subset
