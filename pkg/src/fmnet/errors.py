"""Exception hierarchy shared by every module in the package."""


class FMNetError(Exception):
    """Base class for structured runtime errors.

    ``context`` carries the offending values so callers (and the CLI) can
    report them without parsing the message.
    """

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class ShapeError(FMNetError, ValueError):
    pass


class DomainError(FMNetError, ValueError):
    """Input outside the mathematical domain of an operation (log of 0, NaN, ...)."""


class ConfigError(FMNetError, ValueError):
    pass


class DataError(FMNetError):
    """Dataset or archive problems: bad magic, missing entries, existing output dirs."""
