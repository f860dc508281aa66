"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class IcvsegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IcvsegError):
    """Array extents or layer shapes are inconsistent."""


class StateError(IcvsegError):
    """An operation was invoked in a state it does not support."""


class ConfigError(IcvsegError):
    """Invalid configuration, specification, or usage."""


class DataError(IcvsegError):
    """Unreadable, malformed, or inconsistent data on disk."""


class NumericError(IcvsegError):
    """Non-finite values where finite ones are required."""
