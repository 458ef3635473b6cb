"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every error raised by library code
should derive from one of the three families below.
"""


class FusionSegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(FusionSegError, ValueError):
    """Invalid architecture, fusion or training configuration."""

    exit_code = 1


class ShapeError(ConfigurationError):
    """Tensor shapes disagree with an operation's contract."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class DataError(FusionSegError):
    """Malformed or inconsistent input data (volumes, manifests, labels)."""

    exit_code = 2


class VolumeFormatError(DataError):
    pass


class MagicMismatchError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class HeaderValidationError(VolumeFormatError):
    pass


class CheckpointError(DataError):
    """Checkpoint file is corrupt or does not match the requested architecture."""


class NumericError(FusionSegError, ArithmeticError):
    """Non-finite values or a failed numerical check."""

    exit_code = 3


class StateError(FusionSegError, RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""

    exit_code = 1
