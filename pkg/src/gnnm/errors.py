"""Exception types shared across the package."""


class GnnmError(Exception):
    """Base class for all errors raised by gnnm."""


class ShapeError(GnnmError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(GnnmError, ValueError):
    """A configuration violates one of its invariants."""


class UsageError(GnnmError, ValueError):
    """An API was called outside its preconditions."""


class NonFiniteLossError(GnnmError, RuntimeError):
    """Training produced a NaN or infinite loss."""
