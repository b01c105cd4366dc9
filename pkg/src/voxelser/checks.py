"""Finite-difference oracle suites, one per module, shared by the CLI
``gradcheck`` command and the test-suite."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .asa import AttentionConfig, AttentionParams, ShiftSelector, adaptive_attention, grouped_attention, \
    st_gumbel_select
from .block import BlockWeights, CmlnParams, SceneContext, block_forward, cmln
from .config import ModelConfig
from .crpe import CrpeMlp, angular_deltas, crpe_bias
from .grid import VoxelGrid, partition, serialize
from .losses import cross_entropy, scal_loss
from .numcore import DiffArray, GradcheckReport, gradcheck

H = 1e-5
TOL = 1e-4


def _arr(rng, shape, name, scale=1.0):
    return DiffArray(rng.normal(0.0, scale, shape), True, name)


def _weighted_sum(out: DiffArray, rng) -> DiffArray:
    # a random projection exercises every output element
    w = rng.normal(size=out.shape)
    return nc.sum(nc.mul(out, w))


def toy_grid(seed: int = 0, dims=(4, 4, 4), n_occupied: int = 32, channels: int = 8,
             num_classes: int = 3) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    V = int(np.prod(dims))
    labels = np.zeros(V, dtype=np.uint8)
    occ = rng.choice(V, size=n_occupied, replace=False)
    labels[occ] = rng.integers(1, num_classes + 1, size=n_occupied)
    feats = rng.normal(size=(n_occupied, channels))
    return VoxelGrid(dims, labels, feats, num_classes)


def numcore_suite(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def run(name, f, inputs, **kw):
        reports.append(gradcheck(f, inputs, h=H, tol=TOL, name=name, **kw))

    w = rng.normal(size=(4, 5))
    run("softmax", lambda x: _weighted_sum(nc.softmax(x, axis=1), np.random.default_rng(1)),
        [_arr(rng, (4, 5), "x")])
    run("log_softmax", lambda x: nc.sum(nc.mul(nc.log_softmax(x, axis=0), w)), [_arr(rng, (4, 5), "x")])
    run("layer_norm", lambda x: _weighted_sum(nc.layer_norm(x, axis=-1), np.random.default_rng(2)),
        [_arr(rng, (3, 6), "x")])
    run("matmul", lambda a, b: _weighted_sum(nc.matmul(a, b), np.random.default_rng(3)),
        [_arr(rng, (2, 3, 4), "a"), _arr(rng, (4, 5), "b")])
    run("add_mul_div", lambda a, b: nc.sum(nc.div(nc.mul(nc.add(a, b), a), nc.add(nc.mul(b, b), 1.0))),
        [_arr(rng, (3, 4), "a"), _arr(rng, (4,), "b")])
    run("exp_log", lambda x: nc.sum(nc.log(nc.add(nc.exp(x), 1.0))), [_arr(rng, (5,), "x")])
    run("relu", lambda x: _weighted_sum(nc.relu(x), np.random.default_rng(4)), [_arr(rng, (10,), "x")])
    run("atan2", lambda a, b: nc.sum(nc.atan2(a, b)),
        [DiffArray(rng.uniform(0.5, 2.0, 6) * rng.choice([-1, 1], 6), True, "a"),
         DiffArray(rng.uniform(0.5, 2.0, 6) * rng.choice([-1, 1], 6), True, "b")])
    run("concat_slice_take", lambda a, b: _weighted_sum(
        nc.take(nc.concat([a, nc.slice_rows(b, 1, 3)], axis=0), [0, 3, 3, 1]), np.random.default_rng(5)),
        [_arr(rng, (2, 3), "a"), _arr(rng, (4, 3), "b")])
    run("scatter_rows", lambda base, v: _weighted_sum(nc.scatter_rows(base, [4, 0], v), np.random.default_rng(6)),
        [_arr(rng, (5, 2), "base"), _arr(rng, (2, 2), "v")])
    run("mean_sum", lambda x: nc.mul(nc.sum(nc.mean(nc.mul(x, x), axis=0)), 0.5), [_arr(rng, (3, 4), "x")])
    run("mlp_forward", lambda x, w1, b1, w2, b2: _weighted_sum(
        nc.mlp_forward(x, [w1, w2], [b1, b2]), np.random.default_rng(7)),
        [_arr(rng, (4, 3), "x"), _arr(rng, (3, 6), "w1"), _arr(rng, (6,), "b1"),
         _arr(rng, (6, 2), "w2"), _arr(rng, (2,), "b2")])
    run("conv3d", lambda x, k, b: _weighted_sum(nc.conv3d(x, k, b), np.random.default_rng(8)),
        [_arr(rng, (3, 4, 2, 2), "x"), _arr(rng, (3, 3, 3, 2, 3), "kernel"), _arr(rng, (3,), "bias")])
    return reports


def asa_suite(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    cfg = AttentionConfig(heads=2, head_dim=3, group_size=4)
    params = AttentionParams.init(6, rng)
    tokens = _arr(rng, (10, 6), "tokens")
    bias = _arr(rng, (10, 6), "bias", 0.3)
    seq_grid = toy_grid(seed, dims=(4, 4, 4), n_occupied=10, channels=6)
    part = partition(serialize(seq_grid, "hilbert", 3), cfg.group_size)
    proj = np.random.default_rng(9).normal(size=(10, 6))

    def attn(x, b, *ps):
        return nc.sum(nc.mul(grouped_attention(x, part, cfg, AttentionParams(*ps), bias=b), proj))

    reports.append(gradcheck(attn, [tokens, bias, *params.arrays()], h=H, tol=TOL, name="grouped_attention"))

    # straight-through gradient equals the soft-path gradient
    sel = ShiftSelector(4, 8, logits=rng.normal(size=4))
    noise = np.random.default_rng(10).gumbel(size=4)
    upstream = rng.normal(size=4)
    reports.append(st_soft_equivalence(sel, 0.7, noise, upstream))

    # end-to-end on a 4x4x4 grid with 32 occupied voxels, noise frozen at 0
    grid = toy_grid(seed, n_occupied=32, channels=8)
    acfg = AttentionConfig(heads=2, head_dim=4, group_size=8)
    aparams = AttentionParams.init(8, rng)
    selector = ShiftSelector(4, 8, logits=rng.normal(size=4))
    x = DiffArray(grid.features.copy(), True, "features")
    proj2 = np.random.default_rng(11).normal(size=(32, 8))

    def e2e(feat, *ps):
        out = adaptive_attention(feat, grid, selector, AttentionParams(*ps), acfg, tau=0.5, rng=None)
        return nc.sum(nc.mul(out.tokens, proj2))

    reports.append(gradcheck(e2e, [x, *aparams.arrays()], h=H, tol=TOL, name="asa_forward"))

    # the soft mixture is smooth in the logits, so they can be checked directly
    def vanilla(logits):
        sel2 = ShiftSelector(4, 8)
        sel2.logits = logits
        out = adaptive_attention(x, grid, sel2, aparams, acfg, tau=0.5, mode="vanilla")
        return nc.sum(nc.mul(out.tokens, proj2))

    reports.append(gradcheck(vanilla, [DiffArray(rng.normal(size=4), True, "logits")], h=H, tol=TOL,
                             name="asa_vanilla_logits"))
    return reports


def st_soft_equivalence(selector: ShiftSelector, tau: float, noise, upstream) -> GradcheckReport:
    """Max abs difference between logits gradients through ``y_st`` and
    through ``y_soft`` for the same upstream gradient."""
    grads = []
    for path in ("st", "soft"):
        selector.logits.zero_grad()
        with nc.Tape() as tape:
            choice = st_gumbel_select(selector, tau, noise=noise)
            y = choice.y_st if path == "st" else choice.y_soft
            loss = nc.sum(nc.mul(y, upstream))
        tape.backward(loss)
        grads.append(selector.logits.grad.copy())
    report = GradcheckReport("st_gumbel_vs_soft", 1e-12)
    report.max_rel_error = float(np.max(np.abs(grads[0] - grads[1])))
    report.checked = selector.k
    return report


def crpe_suite(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    grid = toy_grid(seed, dims=(5, 4, 6), n_occupied=20)
    deltas = angular_deltas(grid)
    mlp = CrpeMlp.init(5, rng, hidden=7)
    for b in mlp.biases:
        b.value[:] = rng.normal(0.0, 0.1, b.shape)
    proj = np.random.default_rng(12).normal(size=(20, 5))

    def f(w1, w2, b1, b2):
        return nc.sum(nc.mul(crpe_bias(deltas, CrpeMlp([w1, w2], [b1, b2])), proj))

    return [gradcheck(f, mlp.arrays(), h=H, tol=TOL, name="crpe_mlp")]


def _randomize(arrays, rng, scale=0.3):
    for a in arrays:
        a.value = a.value + rng.normal(0.0, scale, a.shape)


def block_suite(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    C = 6
    params = CmlnParams.init(C, rng, hidden=5)
    _randomize(params.arrays(), rng)
    h = _arr(rng, (7, C), "h")
    ctx = _arr(rng, (C,), "context")
    proj = np.random.default_rng(13).normal(size=(7, C))

    def f(h_, c_, gw1, gw2, gb1, gb2, bw1, bw2, bb1, bb2):
        return nc.sum(nc.mul(cmln(h_, c_, CmlnParams([gw1, gw2], [gb1, gb2], [bw1, bw2], [bb1, bb2])), proj))

    arrays = [h, ctx, *params.gamma_w, *params.gamma_b, *params.beta_w, *params.beta_b]
    reports.append(gradcheck(f, arrays, h=H, tol=TOL, name="cmln"))

    cfg = ModelConfig(channels=8, heads=2, group_size=8, k_shifts=4, ffn_expansion=2, cmln_hidden=6,
                      crpe_hidden=6)
    grid = toy_grid(seed, dims=(4, 4, 4), n_occupied=32, channels=8)
    scene = SceneContext.build(grid, cfg)
    w = BlockWeights(cfg, rng, "block")
    _randomize([a for a in w.arrays() if a is not w.selector.logits], rng, 0.1)
    dense = DiffArray(rng.normal(size=(grid.num_voxels, 8)), True, "dense")
    proj2 = np.random.default_rng(14).normal(size=(grid.num_voxels, 8))
    checked = [dense] + [a for a in w.arrays() if a is not w.selector.logits]

    def blk(*arrs):
        return nc.sum(nc.mul(block_forward(arrs[0], scene, w, cfg, tau=0.5, rng=None), proj2))

    # parameters are read through ``w`` by reference; gradcheck perturbs them in place
    reports.append(gradcheck(blk, checked, h=H, tol=TOL, name="block_forward", max_elements=12, seed=seed))
    return reports


def losses_suite(seed: int = 0) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    logits = _arr(rng, (12, 4), "logits")
    labels = rng.integers(0, 4, size=12)
    labels[:4] = [0, 1, 2, 3]
    reports = [gradcheck(lambda z: cross_entropy(z, labels), [logits], h=H, tol=TOL, name="cross_entropy")]
    for mode in ("semantic", "geometric"):
        reports.append(gradcheck(lambda z: scal_loss(nc.softmax(z, axis=1), labels, mode),
                                 [DiffArray(logits.value.copy(), True, "logits")], h=H, tol=TOL,
                                 name=f"scal_{mode}"))
    return reports


SUITES = {
    "numcore": numcore_suite,
    "asa": asa_suite,
    "crpe": crpe_suite,
    "block": block_suite,
    "losses": losses_suite,
}


def run_suites(module: str = "all", seed: int = 0) -> list[GradcheckReport]:
    names = list(SUITES) if module == "all" else [module]
    out = []
    for name in names:
        out.extend(SUITES[name](seed))
    return out
