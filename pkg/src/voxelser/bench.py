"""Token-pair and wall-time measurements for grouped vs. full attention."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .asa import AttentionConfig, AttentionParams, grouped_attention, token_pairs
from .grid import GroupPartition, SerializedSequence, group_bounds
from .sfc import CurveKind

CSV_HEADER = "n,g,token_pairs,wall_ns"


@dataclass
class BenchRow:
    n: int
    g: int
    token_pairs: int
    wall_ns: int

    def csv(self) -> str:
        return f"{self.n},{self.g},{self.token_pairs},{self.wall_ns}"


def identity_partition(n: int, group_size: int) -> GroupPartition:
    rows = np.arange(n, dtype=np.int64)
    seq = SerializedSequence(rows, rows, CurveKind.ZORDER, 0)
    return GroupPartition(seq, group_size, group_bounds(n, group_size))


def full_attention(tokens: np.ndarray, params: AttentionParams, heads: int, chunk: int = 1024) -> np.ndarray:
    """Unmasked multi-head attention over all tokens, computed in row blocks
    so the N x N score matrix never materialises at once."""
    n, c = tokens.shape
    hd = c // heads
    q = tokens @ params.wq.value + params.bq.value
    k = tokens @ params.wk.value + params.bk.value
    v = tokens @ params.wv.value + params.bv.value
    out = np.empty_like(q)
    scale = 1.0 / math.sqrt(hd)
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        kh_t = k[:, cols].T
        vh = v[:, cols]
        for start in range(0, n, chunk):
            s = (q[start:start + chunk, cols] @ kh_t) * scale
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=1, keepdims=True)
            out[start:start + chunk, cols] = s @ vh
    return out @ params.wo.value + params.bo.value


def bench_attention(mode: str, n: int, g: int, channels: int = 16, heads: int = 2,
                    seed: int = 0, repeats: int = 1) -> BenchRow:
    """Best-of-``repeats`` wall time for one attention forward over ``n``
    random tokens.  ``g`` is ignored by the full mode except in the output."""
    if mode not in ("grouped", "full"):
        raise ValueError(f"attention mode must be 'grouped' or 'full', got {mode!r}")
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(n, channels))
    params = AttentionParams.init(channels, rng)
    best = None
    if mode == "grouped":
        cfg = AttentionConfig(heads, channels // heads, g)
        part = identity_partition(n, g)
        pairs = token_pairs(part)
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            grouped_attention(tokens, part, cfg, params)
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
    else:
        pairs = n * n
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            full_attention(tokens, params, heads)
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
    return BenchRow(n, g, pairs, int(best))


def fit_through_origin(x, y) -> tuple[float, float]:
    """Least-squares slope of ``y = a x`` and its R^2 (about the mean of y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope = float(x @ y / (x @ x))
    ss_res = float(((y - slope * x) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return slope, 1.0 - ss_res / ss_tot
