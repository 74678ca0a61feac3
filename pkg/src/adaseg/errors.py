"""Exception hierarchy shared across the package.

Exit codes used by the CLI: 2 config error, 3 data error, 4 numeric failure.
"""


class AdasegError(Exception):
    exit_code = 1


class ConfigError(AdasegError):
    """Invalid configuration, incompatible shapes declared in configs, bad CLI usage."""

    exit_code = 2


class DataError(AdasegError):
    """Missing or malformed input data (files, manifests, rasters)."""

    exit_code = 3


class NumericError(AdasegError):
    """Non-finite values or undefined metrics."""

    exit_code = 4


class ShapeError(DataError):
    """Tensor shape violates an operation's contract."""


class DomainMismatchError(ConfigError):
    """A reference code's domain does not match the task's target domain."""


class CheckpointError(ConfigError):
    """Checkpoint archive is missing fields or has an unsupported format version."""


class UndefinedMetricError(NumericError):
    """Metric has no defined value for the given inputs (e.g. empty reference mask)."""
