"""Exception types shared across the package."""


class HistaugError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(HistaugError):
    """A file on disk (manifest, config, checkpoint) could not be parsed."""


class ValidationError(HistaugError):
    """An input violates a documented contract (shape, range, label, ...)."""


class InsufficientSamplesError(ValidationError):
    """Too few samples to estimate the requested statistic."""


class InfeasibleSplitError(ValidationError):
    """The requested split cannot be realised with the available patients."""


class NumericalError(HistaugError):
    """A numerical routine failed to converge or produced non-finite values."""
