"""Center-relative positional encoding.

Each occupied voxel gets a yaw and pitch difference between its bearing from
the scene center and the bearing of the grid's geometric center from the
same point.  Bearing vectors:

* voxel:        ``d_i = p_i - c``
* grid center:  ``d_c = g - c`` with ``g = ((D-1)/2, (H-1)/2, (W-1)/2)``

where ``c`` is the occupied-voxel centroid.  Yaw is ``atan2(d_x, d_y)`` (x
first), pitch is ``atan2(d_z, hypot(d_x, d_y))``.  A voxel sitting exactly on
the reference point gets zero deltas.  The two deltas go through a small MLP
whose output is added to the tokens ahead of attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import EmptyScene, ShapeMismatch, ValidationError
from .grid import VoxelGrid
from .numcore import DiffArray

CENTER_MODES = ("occupied", "grid")
ENCODINGS = ("relative", "absolute")


def scene_center(grid: VoxelGrid) -> np.ndarray:
    """Mean integer coordinate of the occupied voxels."""
    if grid.num_occupied == 0:
        raise EmptyScene("grid has no occupied voxels")
    anchor, local = _anchored(grid)
    return anchor + local.mean(axis=0)


def _anchored(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    # Coordinates relative to the occupied minimum are translation-exact, so
    # deltas near the +-pi cut cannot flip sides under a rigid shift.
    coords = grid.occupied_coords().astype(np.float64)
    anchor = coords.min(axis=0)
    return anchor, coords - anchor


def geometric_center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


def yaw_pitch(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    yaw = np.arctan2(d[..., 0], d[..., 1])
    pitch = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    return yaw, pitch


def angular_deltas_from_points(points, center, reference, encoding: str = "relative") -> np.ndarray:
    """``(N, 2)`` array of wrapped ``(dyaw, dpitch)`` per point.

    ``encoding="absolute"`` returns the voxel's own ``(yaw, pitch)`` instead,
    used by the ablation without relative yaw/pitch.
    """
    if encoding not in ENCODINGS:
        raise ValidationError(f"unknown encoding {encoding!r}")
    d_i = np.asarray(points, dtype=np.float64) - center
    d_c = np.asarray(reference, dtype=np.float64) - center
    yaw_i, pitch_i = yaw_pitch(d_i)
    if encoding == "absolute":
        out = np.stack([yaw_i, pitch_i], axis=-1)
    else:
        yaw_c, pitch_c = yaw_pitch(d_c)
        out = np.stack([wrap_angle(yaw_i - yaw_c), wrap_angle(pitch_i - pitch_c)], axis=-1)
    out[np.all(d_i == 0.0, axis=-1)] = 0.0
    return out


def angular_deltas(grid: VoxelGrid, center=None, center_mode: str = "occupied",
                   encoding: str = "relative") -> np.ndarray:
    """Per occupied voxel (rows follow ``grid.occupied``) yaw/pitch deltas.

    ``center_mode="grid"`` replaces the occupied centroid by the geometric
    grid center.
    """
    if center_mode not in CENTER_MODES:
        raise ValidationError(f"unknown center mode {center_mode!r}")
    if grid.num_occupied == 0:
        raise EmptyScene("grid has no occupied voxels")
    anchor, local = _anchored(grid)
    reference = geometric_center(grid.dims) - anchor
    if center is not None:
        center = np.asarray(center, dtype=np.float64) - anchor
    elif center_mode == "occupied":
        center = local.mean(axis=0)
    else:
        center = reference
    return angular_deltas_from_points(local, center, reference, encoding)


@dataclass
class CrpeMlp:
    weights: list
    biases: list

    @classmethod
    def init(cls, out_dim: int, rng, hidden: int = 16, prefix: str = "crpe"):
        rng = np.random.default_rng(rng)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(2), (2, hidden))
        w2 = rng.normal(0.0, 0.1 / math.sqrt(hidden), (hidden, out_dim))
        return cls(
            [DiffArray(w1, True, f"{prefix}.w1"), DiffArray(w2, True, f"{prefix}.w2")],
            [DiffArray(np.zeros(hidden), True, f"{prefix}.b1"),
             DiffArray(np.zeros(out_dim), True, f"{prefix}.b2")],
        )

    def arrays(self) -> list[DiffArray]:
        return [*self.weights, *self.biases]


def crpe_bias(deltas, mlp: CrpeMlp) -> DiffArray:
    """MLP over the ``(N, 2)`` deltas; one bias row per voxel."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 2 or deltas.shape[1] != 2 or mlp.weights[0].shape[0] != 2:
        raise ShapeMismatch(f"CRPE expects (N, 2) deltas and a 2-input MLP, got {deltas.shape}")
    return nc.mlp_forward(DiffArray(deltas), mlp.weights, mlp.biases)
