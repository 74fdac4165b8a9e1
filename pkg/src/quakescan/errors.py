"""Exception taxonomy shared by the library and the CLI.

ParameterError maps to CLI exit code 2 (bad configuration or arguments),
DataError and its subclasses map to exit code 3 (unusable input data).
"""


class QuakescanError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(QuakescanError, ValueError):
    """A parameter, configuration value, or argument combination is invalid."""


class DataError(QuakescanError):
    """Input data cannot be used."""


class FormatError(DataError):
    """A file is not in the expected container format."""


class CorruptInputError(DataError):
    """A file has the right format but violates its own structural invariants."""


class ConsistencyError(DataError):
    """Multiple inputs disagree (parameters, config hashes, station identity)."""
