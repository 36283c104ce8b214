"""Exception types shared across the package."""


class IntrospectError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IntrospectError, ValueError):
    """Invalid configuration: bad shapes, unknown presets, bad config fields."""


class UsageError(IntrospectError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(IntrospectError, ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


class CapabilityError(IntrospectError, NotImplementedError):
    """A primitive without a re-differentiable backward was asked for one."""


class CheckpointError(IntrospectError, IOError):
    """Checkpoint could not be loaded (version, hash, or truncation problems)."""


class ImageFormatError(IntrospectError, ValueError):
    """An image file could not be parsed."""
