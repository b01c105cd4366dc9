import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelser import numcore as nc
from voxelser.asa import (AnnealSchedule, AttentionConfig, AttentionParams, ShiftSelector, adaptive_attention,
                          anneal, asa_forward, grouped_attention, gumbel_from_uniform, sample_gumbel,
                          st_gumbel_select, token_pairs)
from voxelser.bench import identity_partition
from voxelser.checks import asa_suite, st_soft_equivalence, toy_grid
from voxelser.errors import ShapeMismatch, ValidationError
from voxelser.grid import partition, serialize
from voxelser.numcore import DiffArray, Tape


def masked_full_attention(x, params, heads, group_of):
    """Independent oracle: dense N x N attention with a block-diagonal mask."""
    n, c = x.shape
    hd = c // heads
    q = x @ params.wq.value + params.bq.value
    k = x @ params.wk.value + params.bk.value
    v = x @ params.wv.value + params.bv.value
    same = group_of[:, None] == group_of[None, :]
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        s = np.where(same, s, -np.inf)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (s / s.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out @ params.wo.value + params.bo.value


def test_gumbel_fixed_point():
    assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_clamped():
    g = gumbel_from_uniform([0.0, 1.0])
    assert np.all(np.isfinite(g))


def test_gumbel_determinism():
    np.testing.assert_array_equal(sample_gumbel(100, 7), sample_gumbel(100, 7))


def test_gumbel_mean_is_euler_gamma():
    g = sample_gumbel(10 ** 6, 2024)
    assert abs(g.mean() - np.euler_gamma) < 0.01


def test_dominant_logit_selected():
    sel = ShiftSelector(4, 8, logits=[5.0, 0.0, 0.0, 0.0])
    for tau in (0.1, 1.0, 10.0):
        choice = st_gumbel_select(sel, tau, noise=np.zeros(4))
        assert choice.index == 0 and choice.shift == 0
        assert choice.y_st.value.tolist() == [1.0, 0.0, 0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 5.0), st.integers(1, 8))
def test_forward_is_exactly_one_hot(seed, tau, k):
    rng = np.random.default_rng(seed)
    sel = ShiftSelector(k, 8 * k, logits=rng.normal(size=k))
    y = st_gumbel_select(sel, tau, rng=rng).y_st.value
    assert sorted(y.tolist()) == [0.0] * (k - 1) + [1.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 5.0))
def test_straight_through_gradient_equals_soft(seed, tau):
    rng = np.random.default_rng(seed)
    sel = ShiftSelector(4, 8, logits=rng.normal(size=4))
    report = st_soft_equivalence(sel, tau, rng.gumbel(size=4), rng.normal(size=4))
    assert report.max_rel_error < 1e-12


def test_candidate_shifts():
    assert ShiftSelector(4, 12).candidate_shifts == [0, 3, 6, 9]
    assert ShiftSelector(1, 5).candidate_shifts == [0]
    with pytest.raises(ValidationError):
        ShiftSelector(3, 8)
    with pytest.raises(ValidationError):
        ShiftSelector(0, 8)


def test_anneal_examples():
    s = AnnealSchedule(2.0, 0.5, 0.3)
    assert anneal(s, 0) == 2.0
    assert all(anneal(AnnealSchedule(1.5, 0.1, 0.0), t) == 1.5 for t in range(50))
    assert anneal(AnnealSchedule(1.0, 0.1, math.log(10)), 1) == pytest.approx(0.1, abs=1e-12)


@given(st.floats(0.01, 10), st.floats(0.001, 1), st.floats(0, 3))
def test_anneal_monotone_and_floored(tau_init, frac, alpha):
    s = AnnealSchedule(tau_init, tau_init * frac, alpha)
    taus = [s.tau(t) for t in range(60)]
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    assert min(taus) >= s.tau_min


def test_anneal_validation():
    with pytest.raises(ValidationError):
        AnnealSchedule(0.1, 1.0, 0.1)
    with pytest.raises(ValidationError):
        AnnealSchedule(1.0, 0.1, -1.0)


def _setup(rng, n=12, g=4, heads=2, hd=3):
    cfg = AttentionConfig(heads, hd, g)
    params = AttentionParams.init(heads * hd, rng)
    for a in params.arrays():
        a.value = a.value + rng.normal(0.0, 0.2, a.shape)
    return cfg, params


def test_grouped_equals_masked_full(rng):
    cfg, params = _setup(rng)
    x = rng.normal(size=(12, 6))
    part = identity_partition(12, 4)
    out = grouped_attention(x, part, cfg, params).value
    ref = masked_full_attention(x, params, 2, np.arange(12) // 4)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_grouped_equals_masked_full_serialized(rng):
    grid = toy_grid(3, dims=(4, 4, 4), n_occupied=13, channels=6)
    cfg, params = _setup(rng, g=4)
    seq = serialize(grid, "hilbert", 5)
    part = partition(seq, 4)
    x = grid.features
    group_of = np.empty(13, dtype=int)
    for gi, (s, e) in enumerate(part.boundaries):
        group_of[seq.rows[s:e]] = gi
    out = grouped_attention(x, part, cfg, params).value
    ref = masked_full_attention(x, params, 2, group_of)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_single_token_group_is_value_projection(rng):
    cfg, params = _setup(rng, n=5, g=1)
    x = rng.normal(size=(5, 6))
    out = grouped_attention(x, identity_partition(5, 1), cfg, params).value
    ref = (x @ params.wv.value + params.bv.value) @ params.wo.value + params.bo.value
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_identical_groups_identical_outputs(rng):
    cfg, params = _setup(rng)
    block = rng.normal(size=(4, 6))
    x = np.vstack([block, block])
    out = grouped_attention(x, identity_partition(8, 4), cfg, params).value
    np.testing.assert_array_equal(out[:4], out[4:])


def test_group_independence(rng):
    cfg, params = _setup(rng)
    x = rng.normal(size=(12, 6))
    part = identity_partition(12, 4)
    base = grouped_attention(x, part, cfg, params).value
    x2 = x.copy()
    x2[5] += 3.0
    moved = grouped_attention(x2, part, cfg, params).value
    np.testing.assert_array_equal(base[:4], moved[:4])
    np.testing.assert_array_equal(base[8:], moved[8:])
    assert not np.allclose(base[4:8], moved[4:8])


def test_permutation_equivariance_within_group(rng):
    cfg, params = _setup(rng)
    x = rng.normal(size=(12, 6))
    part = identity_partition(12, 4)
    perm = np.arange(12)
    perm[4:8] = [6, 4, 7, 5]
    out = grouped_attention(x, part, cfg, params).value
    out_p = grouped_attention(x[perm], part, cfg, params).value
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_ragged_last_group(rng):
    cfg, params = _setup(rng)
    x = rng.normal(size=(10, 6))
    out = grouped_attention(x, identity_partition(10, 4), cfg, params).value
    ref = masked_full_attention(x, params, 2, np.arange(10) // 4)
    assert np.max(np.abs(out - ref)) < 1e-10


def test_bias_shape_checked(rng):
    cfg, params = _setup(rng)
    with pytest.raises(ShapeMismatch):
        grouped_attention(rng.normal(size=(12, 6)), identity_partition(12, 4), cfg, params,
                          bias=DiffArray(np.zeros((11, 6))))
    with pytest.raises(ShapeMismatch):
        grouped_attention(rng.normal(size=(12, 5)), identity_partition(12, 4), cfg, params)


def _asa_case(rng, k=4, logits=None):
    grid = toy_grid(1, dims=(4, 4, 4), n_occupied=32, channels=8)
    cfg = AttentionConfig(2, 4, 8)
    params = AttentionParams.init(8, rng)
    sel = ShiftSelector(k, 8, logits=logits)
    return grid, cfg, params, sel


def test_k1_is_fixed_shift_with_zero_selector_gradient(rng):
    grid, cfg, params, sel = _asa_case(rng, k=1)
    with Tape() as tape:
        out = asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg, rng=np.random.default_rng(3))
        loss = nc.sum(nc.mul(out.tokens, rng.normal(size=out.tokens.shape)))
    tape.backward(loss)
    fixed = adaptive_attention(DiffArray(grid.features), grid, sel, params, cfg, 1.0, mode="fixed")
    np.testing.assert_array_equal(out.tokens.value, fixed.tokens.value)
    np.testing.assert_array_equal(sel.logits.grad, [0.0])


def test_cheap_mode_forward_matches_full(rng):
    grid, cfg, params, _ = _asa_case(rng)
    for seed in range(5):
        sel = ShiftSelector(4, 8, logits=rng.normal(size=4))
        full = asa_forward(grid, sel, params, AnnealSchedule(), 3, cfg, rng=np.random.default_rng(seed))
        cheap = asa_forward(grid, sel, params, AnnealSchedule(), 3, cfg, rng=np.random.default_rng(seed),
                            full_k=False)
        assert full.shift == cheap.shift
        np.testing.assert_array_equal(full.tokens.value, cheap.tokens.value)


def test_full_k_forward_equals_selected_candidate(rng):
    grid, cfg, params, _ = _asa_case(rng)
    sel = ShiftSelector(4, 8, logits=[0.0, 0.0, 3.0, 0.0])
    out = asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg, rng=None)
    assert out.shift == 4
    part = partition(serialize(grid, cfg.curve, 4), 8)
    ref = grouped_attention(grid.features, part, cfg, params).value
    np.testing.assert_array_equal(out.tokens.value, ref)


def test_outputs_differ_iff_partitions_differ(rng):
    grid, cfg, params, _ = _asa_case(rng)
    outs = {}
    for i in range(4):
        logits = np.zeros(4)
        logits[i] = 4.0
        outs[i] = asa_forward(grid, ShiftSelector(4, 8, logits=logits), params, AnnealSchedule(), 0, cfg)
    for i in range(4):
        for j in range(i + 1, 4):
            pi = partition(serialize(grid, cfg.curve, outs[i].shift), 8)
            pj = partition(serialize(grid, cfg.curve, outs[j].shift), 8)
            same_groups = ({frozenset(pi.sequence.order[s:e]) for s, e in pi.boundaries}
                           == {frozenset(pj.sequence.order[s:e]) for s, e in pj.boundaries})
            assert np.array_equal(outs[i].tokens.value, outs[j].tokens.value) == same_groups


def test_same_groups_same_output_under_full_rotation(rng):
    grid, cfg, params, _ = _asa_case(rng)
    # 32 tokens, G=8: rotating by a multiple of G keeps the same groups
    a = grouped_attention(grid.features, partition(serialize(grid, cfg.curve, 0), 8), cfg, params).value
    b = grouped_attention(grid.features, partition(serialize(grid, cfg.curve, 16), 8), cfg, params).value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_selector_receives_gradient_in_full_mode(rng):
    grid, cfg, params, sel = _asa_case(rng, logits=[0.3, -0.2, 0.1, 0.0])
    with Tape() as tape:
        out = asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg, rng=np.random.default_rng(0))
        loss = nc.sum(nc.mul(out.tokens, rng.normal(size=out.tokens.shape)))
    tape.backward(loss)
    assert np.count_nonzero(sel.logits.grad) == 4
    assert abs(sel.logits.grad.sum()) < 1e-12


def test_eval_is_deterministic(rng):
    grid, cfg, params, sel = _asa_case(rng, logits=[0.1, 0.2, 0.3, 0.0])
    a = asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg)
    b = asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg)
    assert a.shift == b.shift == 4
    np.testing.assert_array_equal(a.tokens.value, b.tokens.value)


def test_token_pairs_linear_in_n():
    for n in (64, 128, 256, 512):
        assert token_pairs(identity_partition(n, 16)) == 16 * n


def test_unknown_mode(rng):
    grid, cfg, params, sel = _asa_case(rng)
    with pytest.raises(ValidationError):
        asa_forward(grid, sel, params, AnnealSchedule(), 0, cfg, mode="bogus")


@pytest.mark.parametrize("report", asa_suite(), ids=lambda r: r.name)
def test_asa_gradients(report):
    assert report.passed, report.line()
