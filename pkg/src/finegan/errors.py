"""Exception hierarchy shared by every module."""


class FineGanError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(FineGanError, ValueError):
    pass


class PreconditionError(FineGanError, ValueError):
    pass


class NumericError(FineGanError, ArithmeticError):
    """Non-finite values or a failed numerical routine.

    ``component`` names the loss term or tensor that went bad, when known.
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class DegenerateVectorError(NumericError):
    pass


class NotPSDError(NumericError):
    pass


class InsufficientSamplesError(PreconditionError):
    pass


class StateError(FineGanError, RuntimeError):
    """A backward pass was requested without a matching forward pass."""


class ContractError(PreconditionError):
    pass


class DataFormatError(FineGanError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(FineGanError):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigError(PreconditionError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
