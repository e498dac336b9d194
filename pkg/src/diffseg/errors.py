"""Exception types shared across the package."""


class DiffSegError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffSegError, ValueError):
    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class DomainError(DiffSegError, ValueError):
    """A value lies outside the domain of a function (e.g. log of a non-positive)."""


class ConfigError(DiffSegError, ValueError):
    """Invalid configuration value or combination."""


class DataError(DiffSegError, ValueError):
    """Malformed dataset content."""


class UsageError(DiffSegError, RuntimeError):
    """An operation was called in a state where it is not allowed."""
