"""
Error hierarchy for the aoisnn package.

Every error that the command line surfaces carries the process exit code it
maps to.
"""


class AoisnnError(Exception):
    """Base class for errors raised by aoisnn."""

    exit_code = 1


class ConfigError(AoisnnError):
    """Invalid configuration value."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        """
        Args:
            field: Dotted path of the offending configuration field
            message: Human readable reason
        """
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(AoisnnError):
    """Malformed or inconsistent input data."""

    exit_code = 3

    def __init__(self, message: str, record_index: int = None):
        self.record_index = record_index
        if record_index is not None:
            message = f"{message} (record {record_index})"
        super().__init__(message)


class FormatError(DataError):
    """Bad magic number or unsupported container version."""


class IntegrityError(DataError):
    """Truncated container, checksum mismatch or shape-table mismatch."""


class CompatibilityError(DataError):
    """Checkpoint does not fit the dataset or the other checkpoints."""


class NumericError(AoisnnError):
    """NaN or infinite values where finite values are required."""

    exit_code = 4


class DimensionError(AoisnnError, ValueError):
    """Tensor shapes do not agree."""

    exit_code = 3


class ContractError(AoisnnError, ValueError):
    """An operation was called outside its preconditions."""


class RangeError(AoisnnError, IndexError):
    """Index, label or timestep outside its valid range."""

    exit_code = 3
