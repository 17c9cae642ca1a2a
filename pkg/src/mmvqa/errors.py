"""Exception hierarchy shared across the package."""


class MMVQAError(Exception):
    """Base class for all package errors."""


class ConfigError(MMVQAError, ValueError):
    pass


class ShapeError(MMVQAError, ValueError):
    pass


class ContractError(MMVQAError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(MMVQAError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class EmptyLossError(MMVQAError, ValueError):
    """Every row of a loss was ignored, so the mean is undefined."""


class DataError(MMVQAError):
    """Malformed or missing input data (files, records, vocabularies)."""


class DecodeError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ModeError(MMVQAError, ValueError):
    pass


class CheckpointError(DataError):
    """A checkpoint file could not be loaded."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or an unsupported format version."""


class FingerprintError(CheckpointError):
    """The checkpoint was written for a different model configuration."""


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    """Checksum mismatch or an unreadable manifest."""
