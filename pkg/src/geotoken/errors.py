"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4.
"""


class GeoTokenError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GeoTokenError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(GeoTokenError):
    """Run configuration is malformed (unknown keys, bad values, bad schema)."""


class DataFormatError(GeoTokenError):
    """A data file is missing, truncated, or violates its declared format."""


class NumericalError(GeoTokenError):
    """Training or evaluation produced non-finite values; aborted."""
