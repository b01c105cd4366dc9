"""Z-order (Morton) and Hilbert keys for 3D integer coordinates.

Z-order bit layout: bit ``i`` of x lands on key bit ``3i``, y on ``3i + 1``
and z on ``3i + 2``, so x owns the least significant bit and
``encode(ZORDER, b, (1, 0, 0)) == 1``.

Hilbert keys use Skilling's transpose construction ("Programming the Hilbert
curve", 2004): coordinates are turned into the transposed Gray-code form and
then bit-interleaved with x as the most significant axis of every triple.

All functions accept scalars or integer numpy arrays (vectorised over
coordinates).
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import CoordinateOutOfRange, KeyOutOfRange, UnknownCurve

MAX_BITS = 20


class CurveKind(enum.Enum):
    ZORDER = "zorder"
    HILBERT = "hilbert"

    @classmethod
    def parse(cls, name: "str | CurveKind") -> "CurveKind":
        if isinstance(name, CurveKind):
            return name
        try:
            return cls(str(name).strip().lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise UnknownCurve(f"unknown curve {name!r}; expected 'zorder' or 'hilbert'") from None


def bits_for_dims(dims) -> int:
    """Smallest bits-per-axis whose cube contains a grid of the given dims."""
    side = max(int(d) for d in dims)
    return max(1, int(side - 1).bit_length())


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits_per_axis must be in [1, {MAX_BITS}], got {bits}")


def _as_coords(coords, bits):
    arr = np.asarray(coords, dtype=np.int64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"coordinates must have a trailing axis of length 3, got {arr.shape}")
    if np.any(arr < 0) or np.any(arr >= (1 << bits)):
        raise CoordinateOutOfRange(f"coordinate outside [0, 2^{bits}) per axis")
    return arr


def _morton_encode(x, y, z, bits):
    key = np.zeros_like(x)
    for i in range(bits):
        key |= ((x >> i) & 1) << (3 * i)
        key |= ((y >> i) & 1) << (3 * i + 1)
        key |= ((z >> i) & 1) << (3 * i + 2)
    return key


def _morton_decode(key, bits):
    x = np.zeros_like(key)
    y = np.zeros_like(key)
    z = np.zeros_like(key)
    for i in range(bits):
        x |= ((key >> (3 * i)) & 1) << i
        y |= ((key >> (3 * i + 1)) & 1) << i
        z |= ((key >> (3 * i + 2)) & 1) << i
    return x, y, z


def _axes_to_transpose(axes, bits):
    X = [a.copy() for a in axes]
    n = len(X)
    M = 1 << (bits - 1)
    Q = M
    while Q > 1:
        P = Q - 1
        for i in range(n):
            hit = (X[i] & Q) != 0
            t = (X[0] ^ X[i]) & P
            if i == 0:
                X[0] = np.where(hit, X[0] ^ P, X[0])
            else:
                x0 = np.where(hit, X[0] ^ P, X[0] ^ t)
                X[i] = np.where(hit, X[i], X[i] ^ t)
                X[0] = x0
        Q >>= 1
    for i in range(1, n):
        X[i] = X[i] ^ X[i - 1]
    t = np.zeros_like(X[0])
    Q = M
    while Q > 1:
        t = np.where((X[n - 1] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    return [xi ^ t for xi in X]


def _transpose_to_axes(X, bits):
    X = [a.copy() for a in X]
    n = len(X)
    N = 2 << (bits - 1)
    t = X[n - 1] >> 1
    for i in range(n - 1, 0, -1):
        X[i] = X[i] ^ X[i - 1]
    X[0] = X[0] ^ t
    Q = 2
    while Q != N:
        P = Q - 1
        for i in range(n - 1, -1, -1):
            hit = (X[i] & Q) != 0
            t = (X[0] ^ X[i]) & P
            if i == 0:
                X[0] = np.where(hit, X[0] ^ P, X[0])
            else:
                x0 = np.where(hit, X[0] ^ P, X[0] ^ t)
                X[i] = np.where(hit, X[i], X[i] ^ t)
                X[0] = x0
        Q <<= 1
    return X


def _hilbert_encode(x, y, z, bits):
    X = _axes_to_transpose([x, y, z], bits)
    key = np.zeros_like(x)
    for j in range(bits - 1, -1, -1):
        for xi in X:
            key = (key << 1) | ((xi >> j) & 1)
    return key


def _hilbert_decode(key, bits):
    X = [np.zeros_like(key) for _ in range(3)]
    pos = 3 * bits - 1
    for j in range(bits - 1, -1, -1):
        for i in range(3):
            X[i] |= ((key >> pos) & 1) << j
            pos -= 1
    return tuple(_transpose_to_axes(X, bits))


def encode_many(kind, bits: int, coords) -> np.ndarray:
    """Keys for an ``(..., 3)`` integer array of coordinates."""
    kind = CurveKind.parse(kind)
    _check_bits(bits)
    c = _as_coords(coords, bits)
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    if kind is CurveKind.ZORDER:
        return _morton_encode(x, y, z, bits)
    return _hilbert_encode(x, y, z, bits)


def decode_many(kind, bits: int, keys) -> np.ndarray:
    """Inverse of :func:`encode_many`; returns an ``(..., 3)`` int64 array."""
    kind = CurveKind.parse(kind)
    _check_bits(bits)
    k = np.asarray(keys, dtype=np.int64)
    if np.any(k < 0) or np.any(k >= (1 << (3 * bits))):
        raise KeyOutOfRange(f"key outside [0, 2^{3 * bits})")
    if kind is CurveKind.ZORDER:
        x, y, z = _morton_decode(k, bits)
    else:
        x, y, z = _hilbert_decode(k, bits)
    return np.stack([x, y, z], axis=-1)


def encode(kind, bits: int, coord) -> int:
    return int(encode_many(kind, bits, np.asarray(coord).reshape(1, 3))[0])


def decode(kind, bits: int, key: int) -> tuple[int, int, int]:
    x, y, z = decode_many(kind, bits, np.asarray([key]))[0]
    return int(x), int(y), int(z)
