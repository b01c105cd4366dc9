"""Serialized sparse-voxel attention with learnable shifts, center-relative
positional encoding and convolution-modulated layer norm, on a small
reverse-mode numpy engine."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BackwardBeforeForward,
    CoordinateOutOfRange,
    EmptyScene,
    InvalidGroupSize,
    KeyOutOfRange,
    LabelOutOfRange,
    NonDeterministicFunction,
    ShapeMismatch,
    VoxelserError,
)
from .grid import VoxelGrid, attention_token_cost, partition, serialize  # noqa: E402
from .sfc import CurveKind, decode, encode  # noqa: E402
