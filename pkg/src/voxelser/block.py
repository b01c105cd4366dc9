"""Convolution-modulated layer norm, the hybrid attention/convolution block,
and the toy encoder/decoder built from it.

Block wiring (pre-norm residuals)::

    x  = occupied rows of the dense volume
    x1 = x  + ASA(LN(x) + crpe_bias)
    x2 = x1 + FFN(LN(x1))
    h  = CMLN(x2 | mean(x))          # plain affine LN when CMLN is off
    v  = dense volume with occupied rows replaced by h
    out = v + relu(conv3d(v))        # stand-in for the DDR refinement block
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import crpe as crpe_mod
from . import numcore as nc
from .asa import AnnealSchedule, AttentionConfig, AttentionParams, ShiftSelector, adaptive_attention
from .config import ModelConfig
from .errors import FileFormatError, ShapeMismatch
from .grid import VoxelGrid, curve_order
from .numcore import DiffArray


@dataclass
class CmlnParams:
    gamma_w: list
    gamma_b: list
    beta_w: list
    beta_b: list

    @classmethod
    def init(cls, channels: int, rng, hidden: int = 16, prefix: str = "cmln"):
        rng = np.random.default_rng(rng)

        def mlp(tag, out_bias):
            w1 = rng.normal(0.0, 1.0 / math.sqrt(channels), (channels, hidden))
            w2 = rng.normal(0.0, 0.1 / math.sqrt(hidden), (hidden, channels))
            return ([DiffArray(w1, True, f"{prefix}.{tag}.w1"), DiffArray(w2, True, f"{prefix}.{tag}.w2")],
                    [DiffArray(np.zeros(hidden), True, f"{prefix}.{tag}.b1"),
                     DiffArray(np.full(channels, out_bias), True, f"{prefix}.{tag}.b2")])

        gw, gb = mlp("gamma", 1.0)
        bw, bb = mlp("beta", 0.0)
        return cls(gw, gb, bw, bb)

    def arrays(self) -> list[DiffArray]:
        return [*self.gamma_w, *self.gamma_b, *self.beta_w, *self.beta_b]


def cmln(h, context, params: CmlnParams, eps: float = 1e-5) -> DiffArray:
    """Layer norm over channels with scale/offset predicted from ``context``.

    ``h`` is ``(N, C)``; ``context`` is a ``(C,)`` scene descriptor.
    """
    h, context = nc._lift(h), nc._lift(context)
    if h.ndim != 2 or context.shape != (h.shape[1],):
        raise ShapeMismatch(f"cmln: h {h.shape} with context {context.shape}")
    ctx = nc.reshape(context, (1, context.shape[0]))
    gamma = nc.mlp_forward(ctx, params.gamma_w, params.gamma_b)
    beta = nc.mlp_forward(ctx, params.beta_w, params.beta_b)
    return nc.add(nc.mul(nc.layer_norm(h, axis=-1, eps=eps), gamma), beta)


def _affine_ln(x, g, b):
    return nc.add(nc.mul(nc.layer_norm(x), g), b)


class BlockWeights:
    def __init__(self, cfg: ModelConfig, rng, prefix: str):
        C = cfg.channels
        F = C * cfg.ffn_expansion
        self.prefix = prefix
        self.attn = AttentionParams.init(C, rng, prefix=f"{prefix}.attn")
        self.selector = ShiftSelector(cfg.k_shifts, cfg.group_size, name=f"{prefix}.shift_logits")
        self.crpe = crpe_mod.CrpeMlp.init(C, rng, hidden=cfg.crpe_hidden, prefix=f"{prefix}.crpe")
        self.cmln = CmlnParams.init(C, rng, hidden=cfg.cmln_hidden, prefix=f"{prefix}.cmln")

        def p(name, value):
            return DiffArray(value, True, f"{prefix}.{name}")

        self.ln1_g, self.ln1_b = p("ln1.g", np.ones(C)), p("ln1.b", np.zeros(C))
        self.ln2_g, self.ln2_b = p("ln2.g", np.ones(C)), p("ln2.b", np.zeros(C))
        self.lnout_g, self.lnout_b = p("lnout.g", np.ones(C)), p("lnout.b", np.zeros(C))
        self.ffn_w1 = p("ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(C), (C, F)))
        self.ffn_b1 = p("ffn.b1", np.zeros(F))
        self.ffn_w2 = p("ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(F), (F, C)))
        self.ffn_b2 = p("ffn.b2", np.zeros(C))
        self.conv_w = p("conv.w", rng.normal(0.0, 0.5 / math.sqrt(27 * C), (3, 3, 3, C, C)))
        self.conv_b = p("conv.b", np.zeros(C))

    def arrays(self) -> list[DiffArray]:
        return [*self.attn.arrays(), self.selector.logits, *self.crpe.arrays(), *self.cmln.arrays(),
                self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b, self.lnout_g, self.lnout_b,
                self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2, self.conv_w, self.conv_b]


@dataclass
class SceneContext:
    """Per-scene quantities shared by every block of one forward pass."""

    grid: VoxelGrid
    base_order: np.ndarray
    deltas: np.ndarray

    @classmethod
    def build(cls, grid: VoxelGrid, cfg: ModelConfig) -> "SceneContext":
        deltas = crpe_mod.angular_deltas(grid, center_mode=cfg.center_mode, encoding=cfg.crpe_encoding)
        return cls(grid, curve_order(grid, cfg.curve), deltas)


def attention_config(cfg: ModelConfig) -> AttentionConfig:
    return AttentionConfig(cfg.heads, cfg.head_dim, cfg.group_size, cfg.curve)


def block_forward(dense, scene: SceneContext, w: BlockWeights, cfg: ModelConfig, tau: float,
                  rng=None, trace: dict | None = None) -> DiffArray:
    """One hybrid block on a ``(D*H*W, C)`` feature volume in linear order.

    ``rng=None`` freezes the Gumbel noise at zero.  The chosen shift is
    appended to ``trace["shifts"]`` when ``trace`` is given.
    """
    grid = scene.grid
    dense = nc._lift(dense)
    if dense.shape != (grid.num_voxels, cfg.channels):
        raise ShapeMismatch(f"block expects ({grid.num_voxels}, {cfg.channels}), got {dense.shape}")
    if cfg.use_asa:
        x = nc.take(dense, grid.occupied)
        h = _affine_ln(x, w.ln1_g, w.ln1_b)
        bias = crpe_mod.crpe_bias(scene.deltas, w.crpe) if cfg.use_crpe else None
        tau_eff = tau if cfg.shift_mode != "gumbel" else cfg.tau_init
        out = adaptive_attention(h, grid, w.selector, w.attn, attention_config(cfg), tau_eff, rng=rng,
                                 mode=cfg.shift_mode, full_k=cfg.full_k, bias=bias,
                                 base_order=scene.base_order)
        if trace is not None:
            trace.setdefault("shifts", []).append(out.shift)
            trace["token_pairs"] = trace.get("token_pairs", 0) + out.token_pairs
        x1 = nc.add(x, out.tokens)
        f = nc.relu(nc.linear(_affine_ln(x1, w.ln2_g, w.ln2_b), w.ffn_w1, w.ffn_b1))
        x2 = nc.add(x1, nc.linear(f, w.ffn_w2, w.ffn_b2))
        if cfg.use_cmln:
            y = cmln(x2, nc.mean(x, axis=0), w.cmln)
        else:
            y = _affine_ln(x2, w.lnout_g, w.lnout_b)
        dense = nc.scatter_rows(dense, grid.occupied, y)
    D, H, W = grid.dims
    vol = nc.reshape(dense, (W, H, D, cfg.channels))
    conv = nc.reshape(nc.relu(nc.conv3d(vol, w.conv_w, w.conv_b)), dense.shape)
    return nc.add(dense, conv)


class SceneModel:
    """Embedding, ``n_blocks`` hybrid blocks, and a two-conv decoder with a
    per-voxel linear classification head over ``num_classes + 1`` labels."""

    def __init__(self, cfg: ModelConfig, in_channels: int, num_classes: int, seed: int = 0):
        self.cfg = cfg
        self.in_channels = in_channels
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        C = cfg.channels
        self.embed_w = DiffArray(rng.normal(0.0, 1.0 / math.sqrt(in_channels), (in_channels, C)), True, "embed.w")
        self.embed_b = DiffArray(np.zeros(C), True, "embed.b")
        self.blocks = [BlockWeights(cfg, rng, f"block{i}") for i in range(cfg.n_blocks)]
        scale = 1.0 / math.sqrt(27 * C)
        self.dec_w = [DiffArray(rng.normal(0.0, scale, (3, 3, 3, C, C)), True, f"dec{i}.w") for i in range(2)]
        self.dec_b = [DiffArray(np.zeros(C), True, f"dec{i}.b") for i in range(2)]
        self.head_w = DiffArray(rng.normal(0.0, 1.0 / math.sqrt(C), (C, num_classes + 1)), True, "head.w")
        self.head_b = DiffArray(np.zeros(num_classes + 1), True, "head.b")

    def parameters(self) -> list[DiffArray]:
        params = [self.embed_w, self.embed_b]
        for b in self.blocks:
            params += b.arrays()
        params += [*self.dec_w, *self.dec_b, self.head_w, self.head_b]
        return params

    def named_parameters(self) -> dict[str, DiffArray]:
        return {p.name: p for p in self.parameters()}

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.cfg.tau_init, self.cfg.tau_min, self.cfg.alpha)

    def encoder_forward(self, grid: VoxelGrid, t: int = 0, rng=None, scene: SceneContext | None = None,
                        trace: dict | None = None) -> DiffArray:
        if grid.channels != self.in_channels:
            raise ShapeMismatch(f"model expects {self.in_channels} input channels, grid has {grid.channels}")
        scene = scene or SceneContext.build(grid, self.cfg)
        tau = self.schedule().tau(t)
        h = nc.linear(DiffArray(grid.dense_features()), self.embed_w, self.embed_b)
        rngs = np.random.default_rng(rng).spawn(len(self.blocks)) if rng is not None else [None] * len(self.blocks)
        for w, r in zip(self.blocks, rngs):
            h = block_forward(h, scene, w, self.cfg, tau, rng=r, trace=trace)
        return h

    def decoder_forward(self, grid: VoxelGrid, features) -> DiffArray:
        D, H, W = grid.dims
        C = self.cfg.channels
        h = nc.reshape(features, (W, H, D, C))
        for w, b in zip(self.dec_w, self.dec_b):
            h = nc.relu(nc.conv3d(h, w, b))
        return nc.linear(nc.reshape(h, (grid.num_voxels, C)), self.head_w, self.head_b)

    def forward(self, grid: VoxelGrid, t: int = 0, rng=None, scene: SceneContext | None = None,
                trace: dict | None = None) -> DiffArray:
        """Per-voxel class logits ``(D*H*W, num_classes + 1)``."""
        return self.decoder_forward(grid, self.encoder_forward(grid, t, rng, scene, trace))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise FileFormatError(f"checkpoint lacks {len(missing)} arrays, e.g. {sorted(missing)[0]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise FileFormatError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.value = value.copy()
            p.zero_grad()


CKPT_MAGIC = b"VSWT"
CKPT_VERSION = 1


def write_checkpoint(state: dict[str, np.ndarray], path) -> None:
    """VSWT layout (little-endian): magic, u16 version, u32 record count, then
    per record u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f64
    payload in C order."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(state)))
        for name, value in state.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FileFormatError(f"{path}: not a VSWT checkpoint")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        off = 10
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FileFormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise FileFormatError(f"{path}: {len(data) - off} trailing bytes")
    return state
