"""Exception hierarchy shared across the package.

Anything raised as :class:`UserError` (or a subclass) is a problem with the
caller's inputs -- bad files, bad config, impossible parameter combinations --
and maps to CLI exit code 1. Everything else is treated as an internal error
(exit code 2).
"""


class UserError(Exception):
    """Input, file, or configuration problem attributable to the caller."""


class DataFormatError(UserError):
    """A data file does not match the expected schema or adapter."""


class ConfigError(UserError):
    """A config document failed validation."""
