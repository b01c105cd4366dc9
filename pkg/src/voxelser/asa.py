"""Adaptive serialized attention.

Grouped multi-head self-attention over curve-serialized voxel tokens, where
the serialization shift is picked from ``K`` candidates by a learnable
straight-through Gumbel-Softmax selector with an annealed temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ShapeMismatch, ValidationError
from .grid import GroupPartition, VoxelGrid, curve_order, partition, serialize
from .numcore import DiffArray
from .sfc import CurveKind

GUMBEL_EPS = 1e-12

SHIFT_MODES = ("annealed", "gumbel", "vanilla", "fixed")


@dataclass
class AttentionConfig:
    heads: int = 2
    head_dim: int = 8
    group_size: int = 32
    curve: CurveKind = CurveKind.HILBERT

    def __post_init__(self):
        self.curve = CurveKind.parse(self.curve)
        if self.heads < 1 or self.head_dim < 1:
            raise ValidationError("heads and head_dim must be positive")
        if self.group_size < 1:
            raise ValidationError("group_size must be positive")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


@dataclass
class AnnealSchedule:
    tau_init: float = 1.0
    tau_min: float = 0.1
    alpha: float = 0.01

    def __post_init__(self):
        if not (self.tau_init >= self.tau_min > 0):
            raise ValidationError("need tau_init >= tau_min > 0")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")

    def tau(self, t: int) -> float:
        return anneal(self, t)


def anneal(schedule: AnnealSchedule, t: int) -> float:
    """Temperature at epoch ``t``: exponential decay clamped at ``tau_min``."""
    if t < 0:
        raise ValueError("epoch must be non-negative")
    return max(schedule.tau_min, schedule.tau_init * math.exp(-schedule.alpha * t))


class ShiftSelector:
    """``K`` logits over the candidate shifts ``k * (P // K)``."""

    def __init__(self, k: int = 4, patch_size: int = 32, logits=None, name: str = "shift_logits"):
        if k < 1:
            raise ValidationError("K must be >= 1")
        if patch_size % k:
            raise ValidationError(f"patch size {patch_size} is not divisible by K={k}")
        self.k = k
        self.patch_size = patch_size
        init = np.zeros(k) if logits is None else np.asarray(logits, dtype=np.float64)
        if init.shape != (k,):
            raise ShapeMismatch(f"expected {k} logits, got shape {init.shape}")
        self.logits = DiffArray(init, requires_grad=True, name=name)

    @property
    def candidate_shifts(self) -> list[int]:
        step = self.patch_size // self.k
        return [i * step for i in range(self.k)]


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng) -> np.ndarray:
    """Standard Gumbel noise; ``rng`` is a seed or ``np.random.Generator``."""
    rng = np.random.default_rng(rng)
    return gumbel_from_uniform(rng.random(shape))


@dataclass
class ShiftChoice:
    index: int
    shift: int
    y_st: DiffArray
    y_soft: DiffArray


def st_gumbel_select(selector: ShiftSelector, tau: float, rng=None, noise=None) -> ShiftChoice:
    """Straight-through Gumbel-Softmax over the selector's candidates.

    Noise is drawn from ``rng`` when given, taken from ``noise`` when given,
    and zero otherwise (deterministic evaluation).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if noise is None:
        noise = sample_gumbel(selector.k, rng) if rng is not None else np.zeros(selector.k)
    y_soft = nc.softmax(nc.mul(nc.add(selector.logits, noise), 1.0 / tau))
    idx = int(np.argmax(y_soft.value))
    hard = np.zeros(selector.k)
    hard[idx] = 1.0
    y_st = nc.straight_through(hard, y_soft)
    return ShiftChoice(idx, selector.candidate_shifts[idx], y_st, y_soft)


@dataclass
class AttentionParams:
    wq: DiffArray
    bq: DiffArray
    wk: DiffArray
    bk: DiffArray
    wv: DiffArray
    bv: DiffArray
    wo: DiffArray
    bo: DiffArray

    @classmethod
    def init(cls, channels: int, rng, prefix: str = "attn", scale: float = 1.0):
        rng = np.random.default_rng(rng)
        arrays = {}
        for n in ("q", "k", "v", "o"):
            w = rng.normal(0.0, scale / math.sqrt(channels), (channels, channels))
            arrays[f"w{n}"] = DiffArray(w, True, f"{prefix}.w{n}")
            arrays[f"b{n}"] = DiffArray(np.zeros(channels), True, f"{prefix}.b{n}")
        return cls(**arrays)

    def arrays(self) -> list[DiffArray]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def _attend(q, k, v, n_groups: int, g: int, cfg: AttentionConfig):
    H, hd = cfg.heads, cfg.head_dim

    def split(a):
        return nc.transpose(nc.reshape(a, (n_groups, g, H, hd)), (0, 2, 1, 3))

    scores = nc.mul(nc.matmul(split(q), nc.transpose(split(k), (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    out = nc.matmul(nc.softmax(scores, axis=-1), split(v))
    return nc.reshape(nc.transpose(out, (0, 2, 1, 3)), (n_groups * g, H * hd))


def grouped_core(q, k, v, part: GroupPartition, cfg: AttentionConfig) -> DiffArray:
    """Scaled dot-product attention within each group of ``part``.

    Inputs and output are in token-row order; grouping follows the
    partition's serialized order.
    """
    rows = part.sequence.rows
    n = rows.size
    if q.shape[0] != n:
        raise ShapeMismatch(f"partition covers {n} tokens, got {q.shape[0]} rows")
    qs, ks, vs = nc.take(q, rows), nc.take(k, rows), nc.take(v, rows)
    G = part.group_size
    n_full = n // G
    pieces = []
    if n_full:
        cut = n_full * G
        pieces.append(_attend(nc.slice_rows(qs, 0, cut), nc.slice_rows(ks, 0, cut),
                              nc.slice_rows(vs, 0, cut), n_full, G, cfg))
    if n - n_full * G:
        start = n_full * G
        r = n - start
        pieces.append(_attend(nc.slice_rows(qs, start, n), nc.slice_rows(ks, start, n),
                              nc.slice_rows(vs, start, n), 1, r, cfg))
    ordered = pieces[0] if len(pieces) == 1 else nc.concat(pieces, axis=0)
    inverse = np.empty(n, dtype=np.int64)
    inverse[rows] = np.arange(n)
    return nc.take(ordered, inverse)


def project_qkv(tokens, params: AttentionParams, bias=None):
    x = nc.add(tokens, bias) if bias is not None else tokens
    return (nc.linear(x, params.wq, params.bq), nc.linear(x, params.wk, params.bk),
            nc.linear(x, params.wv, params.bv))


def grouped_attention(tokens, part: GroupPartition, cfg: AttentionConfig,
                      params: AttentionParams, bias=None) -> DiffArray:
    """Multi-head self-attention restricted to the groups of ``part``.

    ``bias`` (same shape as ``tokens``) is added to the tokens before the
    query/key/value projections.
    """
    tokens = nc._lift(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.channels:
        raise ShapeMismatch(f"tokens must be (N, {cfg.channels}), got {tokens.shape}")
    if bias is not None and nc._lift(bias).shape != tokens.shape:
        raise ShapeMismatch(f"bias shape {nc._lift(bias).shape} != tokens shape {tokens.shape}")
    q, k, v = project_qkv(tokens, params, bias)
    return nc.linear(grouped_core(q, k, v, part, cfg), params.wo, params.bo)


def token_pairs(part: GroupPartition) -> int:
    return sum(s * s for s in part.sizes())


@dataclass
class AsaOutput:
    tokens: DiffArray
    shift: int
    choice: ShiftChoice | None
    token_pairs: int


def adaptive_attention(tokens, grid: VoxelGrid, selector: ShiftSelector, params: AttentionParams,
                       cfg: AttentionConfig, tau: float, rng=None, mode: str = "annealed",
                       full_k: bool = True, bias=None, base_order=None) -> AsaOutput:
    """Shift-selected grouped attention over the occupied voxels of ``grid``.

    ``tokens`` rows follow ``grid.occupied``.  Modes:

    * ``annealed`` / ``gumbel``: straight-through selection (the caller picks
      ``tau``); with ``full_k`` every candidate is evaluated and mixed by the
      one-hot ``y_st`` so all logits get gradient, otherwise only the chosen
      candidate runs and is scaled by its ``y_st`` entry.
    * ``vanilla``: softmax(logits / tau) mixture of all candidates.
    * ``fixed``: shift 0, selector unused.
    """
    if mode not in SHIFT_MODES:
        raise ValidationError(f"unknown shift mode {mode!r}")
    if base_order is None:
        base_order = curve_order(grid, cfg.curve)
    q, k, v = project_qkv(nc._lift(tokens), params, bias)

    def run(shift):
        part = partition(serialize(grid, cfg.curve, shift, base_order=base_order), cfg.group_size)
        return grouped_core(q, k, v, part, cfg), token_pairs(part)

    if mode == "fixed":
        core, pairs = run(0)
        return AsaOutput(nc.linear(core, params.wo, params.bo), 0, None, pairs)

    shifts = selector.candidate_shifts
    if mode == "vanilla":
        weights = nc.softmax(nc.mul(selector.logits, 1.0 / tau))
        mixed, pairs = None, 0
        for i, s in enumerate(shifts):
            core, p = run(s)
            pairs += p
            term = nc.mul(core, nc.index(weights, (slice(i, i + 1),)))
            mixed = term if mixed is None else nc.add(mixed, term)
        idx = int(np.argmax(weights.value))
        return AsaOutput(nc.linear(mixed, params.wo, params.bo), shifts[idx], None, pairs)

    choice = st_gumbel_select(selector, tau, rng=rng)
    if full_k:
        mixed, pairs = None, 0
        for i, s in enumerate(shifts):
            core, p = run(s)
            pairs += p
            term = nc.mul(core, nc.index(choice.y_st, (slice(i, i + 1),)))
            mixed = term if mixed is None else nc.add(mixed, term)
    else:
        core, pairs = run(choice.shift)
        mixed = nc.mul(core, nc.index(choice.y_st, (slice(choice.index, choice.index + 1),)))
    return AsaOutput(nc.linear(mixed, params.wo, params.bo), choice.shift, choice, pairs)


def asa_forward(grid: VoxelGrid, selector: ShiftSelector, params: AttentionParams,
                schedule: AnnealSchedule, t: int, cfg: AttentionConfig, rng=None,
                mode: str = "annealed", full_k: bool = True, bias=None) -> AsaOutput:
    """Anneal, select a shift, serialize, partition and attend over the
    grid's occupied-voxel features.  ``rng=None`` freezes the noise at 0."""
    tau = schedule.tau(t) if mode != "gumbel" else schedule.tau_init
    tokens = DiffArray(grid.features)
    return adaptive_attention(tokens, grid, selector, params, cfg, tau, rng=rng, mode=mode,
                              full_k=full_k, bias=bias)
