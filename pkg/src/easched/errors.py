"""Exception types shared across the package.

The CLI maps these onto process exit codes (see cli.py); library code
raises them directly.
"""


class EaschedError(Exception):
    """Base class for all package errors."""


class UsageError(EaschedError):
    """An operation was called in a way its contract forbids."""


class ConfigError(EaschedError):
    """A configuration value violates its invariants."""


class NumericError(EaschedError):
    """A numeric computation produced non-finite values."""


class CheckpointFormatError(ConfigError):
    """A checkpoint file is corrupt, truncated, or from a different layout."""
