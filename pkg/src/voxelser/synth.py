"""Synthetic labelled voxel scenes built from boxes and plane slabs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import parse_kv, read_kv
from .errors import ConfigError, EmptyScene, PrimitiveOutOfBounds
from .grid import VoxelGrid

FEATURE_NOISE = 0.01


@dataclass(frozen=True)
class Box:
    """Half-open box ``[lo, hi)`` per axis, painted with ``label``."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    label: int


def plane(axis: int, start: int, thickness: int, label: int, dims) -> Box:
    """A slab spanning the full grid across the two other axes."""
    lo = [0, 0, 0]
    hi = list(dims)
    lo[axis] = start
    hi[axis] = start + thickness
    return Box(tuple(lo), tuple(hi), label)


@dataclass
class SceneSpec:
    dims: tuple[int, int, int]
    num_classes: int
    primitives: list = field(default_factory=list)
    seed: int = 0
    noise: float = FEATURE_NOISE


def room_scene(dims=(8, 8, 8), seed: int = 0) -> SceneSpec:
    """L-shaped room: floor (1), two walls (2), and furniture (3), one piece
    tucked into the corner behind another."""
    D, H, W = dims
    prims = [
        Box((0, 0, 0), (D, H, 1), 1),
        Box((D // 2, H // 2, 0), (D, H, 1), 0),
        plane(0, 0, 1, 2, dims),
        plane(1, 0, 1, 2, dims),
        Box((1, 1, 1), (1 + max(1, D // 4), 1 + max(1, H // 4), 1 + max(1, W // 4)), 3),
        Box((D // 4 + 1, 1, 1), (D // 2 + 1, H // 2, 1 + max(1, W // 2 - 1)), 3),
    ]
    return SceneSpec(tuple(dims), 3, prims, seed)


def generate(spec: SceneSpec) -> VoxelGrid:
    """Paint primitives in order (later overwrite earlier) and attach
    one-hot(label) + N(0, noise^2) features to the occupied voxels."""
    D, H, W = spec.dims
    labels = np.zeros((D, H, W), dtype=np.uint8)
    for p in spec.primitives:
        if any(l < 0 or h > n or l >= h for l, h, n in zip(p.lo, p.hi, spec.dims)):
            raise PrimitiveOutOfBounds(f"{p} does not fit in dims {spec.dims}")
        if not 0 <= p.label <= spec.num_classes:
            raise PrimitiveOutOfBounds(f"label {p.label} outside [0, {spec.num_classes}]")
        labels[p.lo[0]:p.hi[0], p.lo[1]:p.hi[1], p.lo[2]:p.hi[2]] = p.label
    flat = labels.ravel(order="F")
    occ = np.flatnonzero(flat)
    if occ.size == 0:
        raise EmptyScene("scene spec produces no occupied voxels")
    rng = np.random.default_rng(spec.seed)
    feats = np.eye(spec.num_classes + 1)[flat[occ]] + rng.normal(0.0, spec.noise, (occ.size, spec.num_classes + 1))
    return VoxelGrid(spec.dims, flat, feats, spec.num_classes)


def _ints(value: str, n: int, key: str) -> list[int]:
    try:
        out = [int(v) for v in value.replace(" ", "").split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected integers, got {value!r}") from None
    if len(out) != n:
        raise ConfigError(f"{key}: expected {n} comma-separated integers, got {value!r}")
    return out


def spec_from_pairs(pairs) -> SceneSpec:
    """Keys: ``dims=D,H,W``, ``classes=N``, ``seed``, ``noise``,
    ``preset=room``, repeated ``box=x0,y0,z0,x1,y1,z1,label`` and
    ``plane=axis,start,thickness,label``."""
    opts = {"dims": "8,8,8", "classes": None, "seed": "0", "noise": str(FEATURE_NOISE), "preset": None}
    shapes = []
    for key, value in pairs:
        if key in ("box", "plane"):
            shapes.append((key, value))
        elif key in opts:
            opts[key] = value
        else:
            raise ConfigError(f"unknown scene key {key!r}")
    dims = tuple(_ints(opts["dims"], 3, "dims"))
    seed = int(opts["seed"])
    if opts["preset"] == "room":
        spec = room_scene(dims, seed)
    elif opts["preset"] is None:
        spec = SceneSpec(dims, 0, [], seed)
    else:
        raise ConfigError(f"unknown preset {opts['preset']!r}")
    for key, value in shapes:
        if key == "box":
            v = _ints(value, 7, key)
            spec.primitives.append(Box(tuple(v[:3]), tuple(v[3:6]), v[6]))
        else:
            axis, start, thick, label = _ints(value, 4, key)
            if axis not in (0, 1, 2):
                raise ConfigError(f"plane axis must be 0, 1 or 2, got {axis}")
            spec.primitives.append(plane(axis, start, thick, label, dims))
    if opts["classes"] is not None:
        spec.num_classes = int(opts["classes"])
    elif spec.primitives:
        spec.num_classes = max(spec.num_classes, max(p.label for p in spec.primitives))
    spec.noise = float(opts["noise"])
    return spec


def load_spec(path) -> SceneSpec:
    return spec_from_pairs(read_kv(path))


def parse_spec(text: str) -> SceneSpec:
    return spec_from_pairs(parse_kv(text))
