"""Voxel scene container, curve serialization with cyclic shift, and
padding-free group partitions.

Linear voxel index is x-fastest: ``i = x + D * (y + H * z)`` for a grid of
dims ``(D, H, W)`` and coordinate ``(x, y, z)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sfc
from .errors import EmptyScene, FileFormatError, InvalidGroupSize, ShapeMismatch

MAGIC = b"VSER"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIHH")


def linear_to_coords(index, dims) -> np.ndarray:
    D, H, _ = dims
    index = np.asarray(index, dtype=np.int64)
    x = index % D
    y = (index // D) % H
    z = index // (D * H)
    return np.stack([x, y, z], axis=-1)


def coords_to_linear(coords, dims) -> np.ndarray:
    D, H, _ = dims
    c = np.asarray(coords, dtype=np.int64)
    return c[..., 0] + D * (c[..., 1] + H * c[..., 2])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense labels plus features for the occupied voxels.

    ``labels`` is a flat ``uint8`` array of length ``D*H*W`` in linear order;
    0 means empty.  ``features`` has one row per occupied voxel, rows ordered
    by ascending linear index (the same order as :attr:`occupied`).
    """

    dims: tuple[int, int, int]
    labels: np.ndarray
    features: np.ndarray
    num_classes: int
    occupied: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeMismatch(f"dims must be three positive ints, got {self.dims}")
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if labels.size != dims[0] * dims[1] * dims[2]:
            raise ShapeMismatch(f"labels has {labels.size} entries, expected {math.prod(dims)}")
        if labels.size and int(labels.max()) > self.num_classes:
            raise ShapeMismatch(f"label {int(labels.max())} exceeds class count {self.num_classes}")
        occupied = np.flatnonzero(labels > 0).astype(np.int64)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != occupied.size:
            raise ShapeMismatch(
                f"features must be ({occupied.size}, C) for {occupied.size} occupied voxels, "
                f"got {features.shape}"
            )
        labels.setflags(write=False)
        features.setflags(write=False)
        occupied.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "occupied", occupied)

    @classmethod
    def from_dense(cls, labels_xyz: np.ndarray, num_classes: int, features_dense=None):
        """Build from a ``(D, H, W)`` label volume indexed ``[x, y, z]``.

        ``features_dense``, if given, is ``(D, H, W, C)``; only occupied rows
        are kept.  Without it the features are one-hot labels.
        """
        labels_xyz = np.asarray(labels_xyz)
        dims = labels_xyz.shape
        flat = labels_xyz.ravel(order="F")
        occ = np.flatnonzero(flat > 0)
        if features_dense is None:
            feats = np.eye(num_classes + 1)[flat[occ]]
        else:
            fd = np.asarray(features_dense, dtype=np.float64)
            feats = fd.reshape(-1, fd.shape[-1], order="F")[occ]
        return cls(dims, flat, feats, num_classes)

    @property
    def num_voxels(self) -> int:
        return int(self.labels.size)

    @property
    def num_occupied(self) -> int:
        return int(self.occupied.size)

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    def occupied_coords(self) -> np.ndarray:
        return linear_to_coords(self.occupied, self.dims)

    def dense_features(self) -> np.ndarray:
        """``(D*H*W, C)`` features in linear order; empty voxels are zero."""
        out = np.zeros((self.num_voxels, self.channels))
        out[self.occupied] = self.features
        return out

    def labels_xyz(self) -> np.ndarray:
        return self.labels.reshape(self.dims, order="F")


@dataclass(frozen=True)
class SerializedSequence:
    """Voxel linear indices in serialized order.

    ``rows`` maps each position to the voxel's row in ``grid.features`` (or to
    its linear index when all voxels are serialized).
    """

    order: np.ndarray
    rows: np.ndarray
    kind: sfc.CurveKind
    shift: int

    def __len__(self) -> int:
        return int(self.order.size)


@dataclass(frozen=True)
class GroupPartition:
    sequence: SerializedSequence
    group_size: int
    boundaries: tuple[tuple[int, int], ...]

    @property
    def num_groups(self) -> int:
        return len(self.boundaries)

    def sizes(self) -> list[int]:
        return [end - start for start, end in self.boundaries]


def curve_order(grid: VoxelGrid, kind, occupied_only: bool = True) -> np.ndarray:
    """Unshifted serialization: voxel linear indices sorted by curve key."""
    kind = sfc.CurveKind.parse(kind)
    if occupied_only:
        index = grid.occupied
    else:
        index = np.arange(grid.num_voxels, dtype=np.int64)
    if index.size == 0:
        raise EmptyScene("grid has no occupied voxels")
    bits = sfc.bits_for_dims(grid.dims)
    keys = sfc.encode_many(kind, bits, linear_to_coords(index, grid.dims))
    return index[np.argsort(keys, kind="stable")]


def rotate(order: np.ndarray, shift: int) -> np.ndarray:
    """Cyclic left rotation by ``shift mod len(order)``."""
    if shift < 0:
        raise ValueError("shift must be non-negative")
    n = order.size
    return np.roll(order, -(shift % n)) if n else order


def serialize(grid: VoxelGrid, kind, shift: int = 0, occupied_only: bool = True,
              base_order: np.ndarray | None = None) -> SerializedSequence:
    """Serialize the grid along a curve, then rotate left by ``shift``.

    ``base_order`` lets callers reuse a precomputed :func:`curve_order`.
    """
    kind = sfc.CurveKind.parse(kind)
    if shift < 0:
        raise ValueError("shift must be non-negative")
    if base_order is None:
        base_order = curve_order(grid, kind, occupied_only)
    order = rotate(base_order, shift)
    if occupied_only:
        rows = np.searchsorted(grid.occupied, order)
    else:
        rows = order.copy()
    return SerializedSequence(order, rows, kind, int(shift % order.size))


def group_bounds(n: int, group_size: int) -> tuple[tuple[int, int], ...]:
    if group_size < 1:
        raise InvalidGroupSize(f"group size must be >= 1, got {group_size}")
    m = -(-n // group_size)
    return tuple((i * group_size, min((i + 1) * group_size, n)) for i in range(m))


def partition(seq: SerializedSequence, group_size: int) -> GroupPartition:
    """Split into ceil(N/G) contiguous groups; only the last may be short."""
    return GroupPartition(seq, int(group_size), group_bounds(len(seq), int(group_size)))


def attention_token_cost(n: int, group_size: int) -> tuple[int, int]:
    """(token pairs for grouped attention, token pairs for full attention)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grouped = sum((e - s) ** 2 for s, e in group_bounds(n, group_size))
    return grouped, n * n


def window_token_cost(grid: VoxelGrid, window: int) -> tuple[int, int]:
    """Cost model of cubic window grouping with padding to the fullest window.

    Returns ``(token_pairs, padded_tokens)``; included for comparison only.
    """
    coords = grid.occupied_coords() // window
    _, counts = np.unique(coords, axis=0, return_counts=True)
    cap = int(counts.max())
    return int(counts.size * cap * cap), int(counts.size * cap - counts.sum())


def write_vser(grid: VoxelGrid, path) -> None:
    D, H, W = grid.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, D, H, W, grid.num_classes, grid.channels))
        fh.write(grid.labels.astype("<u1").tobytes())
        fh.write(grid.features.astype("<f4").tobytes())


def read_vser(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    magic, version, D, H, W, n_cls, C = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    V = D * H * W
    off = _HEADER.size
    if len(data) < off + V:
        raise FileFormatError(f"{path}: truncated label block")
    labels = np.frombuffer(data, dtype="<u1", count=V, offset=off)
    off += V
    n_occ = int(np.count_nonzero(labels))
    need = n_occ * C * 4
    if len(data) != off + need:
        raise FileFormatError(f"{path}: expected {need} feature bytes, found {len(data) - off}")
    feats = np.frombuffer(data, dtype="<f4", count=n_occ * C, offset=off).reshape(n_occ, C)
    try:
        return VoxelGrid((D, H, W), labels.copy(), feats.astype(np.float64), int(n_cls))
    except ShapeMismatch as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
