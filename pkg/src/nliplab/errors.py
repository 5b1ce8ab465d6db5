"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/config
errors exit 2, numerical failures exit 3.
"""


class UsageError(Exception):
    """Bad command line (unknown flag, missing subcommand)."""


class DataError(Exception):
    """Problem with user-supplied data or configuration."""


class ParseError(DataError):
    """Malformed input file; message names the offending line."""


class ConfigError(DataError):
    """Invalid or inconsistent configuration value."""


class ContractError(ValueError):
    """An argument violates an operation's stated precondition."""


class InsufficientDataError(ContractError):
    """Too few samples for the requested fit."""


class UndefinedMetricError(ContractError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericalError(RuntimeError):
    """Non-finite values or numerically invalid state at runtime."""
