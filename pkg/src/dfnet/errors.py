"""Exception hierarchy for the package.

The CLI maps these onto process exit codes: configuration, usage and format
problems exit with 2, numeric failures (non-finite values, divergence) with 3.
"""


class DFNetError(Exception):
    """Base class for all package errors."""


class ConfigError(DFNetError):
    """A config file or option is missing, unknown, or out of range."""


class UsageError(DFNetError):
    """An API call violated a precondition (shape, dtype, argument)."""


class FormatError(DFNetError):
    """A checkpoint or data file is malformed or truncated."""


class NumericError(DFNetError):
    """An operation produced non-finite values."""


class TrainingDiverged(NumericError):
    """Training hit NaN/inf and cannot continue."""
