"""Exception hierarchy shared across the package."""


class ClvError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidValue(ClvError, ValueError):
    exit_code = 3


class InvalidDiscount(ClvError, ValueError):
    exit_code = 2


class ConfigError(ClvError, ValueError):
    exit_code = 2


class SchemaError(ClvError, ValueError):
    exit_code = 3


class DataError(ClvError, ValueError):
    exit_code = 3


class TaskError(ClvError, TypeError):
    exit_code = 2


class NotApplicable(ClvError):
    """Raised when a propensity is requested for a customer already in the target group."""

    exit_code = 3


class VersionError(ClvError):
    exit_code = 4


class BundleFormatError(ClvError):
    exit_code = 4
