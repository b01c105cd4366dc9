"""Exception hierarchy shared across voxelser modules."""


class VoxelserError(Exception):
    """Base class for every error raised by the library."""


class ValidationError(VoxelserError, ValueError):
    """Bad input detected before any work is done (CLI exit code 1)."""


class CoordinateOutOfRange(ValidationError):
    pass


class KeyOutOfRange(ValidationError):
    pass


class UnknownCurve(ValidationError):
    pass


class EmptyScene(ValidationError):
    pass


class InvalidGroupSize(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class PrimitiveOutOfBounds(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class BackwardBeforeForward(VoxelserError, RuntimeError):
    """backward() called on a tape that holds no forward record for the target,
    or called a second time on an already consumed tape."""


class NonDeterministicFunction(VoxelserError, RuntimeError):
    pass


class FileFormatError(VoxelserError, OSError):
    """Malformed VSER/VSWT payload (CLI exit code 2)."""
