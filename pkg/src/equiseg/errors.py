"""Shared exception types."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class UnsupportedConfiguration(ValueError):
    """A configuration is syntactically valid but deliberately not supported."""


class NumericalFailure(RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


class LoadError(RuntimeError):
    """A dataset or checkpoint could not be loaded."""
