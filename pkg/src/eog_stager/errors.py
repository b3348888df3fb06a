"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError (and
ConfigError) -> 2, NumericError -> 3.
"""


class EogStagerError(Exception):
    """Base class for all package errors."""


class ShapeError(EogStagerError):
    """Tensor-op shape/argument mismatch, names the offending dimension."""


class ConfigError(EogStagerError):
    """Invalid model/training/dataset configuration."""


class DataError(EogStagerError):
    """Malformed or missing input data (files, labels, manifests)."""


class EdfError(DataError):
    """EDF parse failure; carries the byte offset where parsing broke."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or inconsistent with its config."""


class NumericError(EogStagerError):
    """Non-finite values where finite ones are required (NaN/Inf is an error state)."""


class UsageError(EogStagerError):
    """Bad command-line usage."""
