"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, dimensions or settings."""


class EmptySetError(ValueError):
    """An operation needed at least one element (slice, sample, row)."""


class DataError(ValueError):
    """Input data does not match what the model or pipeline expects."""


class FormatError(DataError):
    """A file on disk is malformed or truncated."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, lr=None, grad_norm=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
