import numpy as np
import pytest

from voxelser import numcore as nc
from voxelser.block import (BlockWeights, CmlnParams, SceneContext, SceneModel, block_forward, cmln,
                            read_checkpoint, write_checkpoint)
from voxelser.checks import block_suite
from voxelser.config import ModelConfig
from voxelser.errors import FileFormatError, ShapeMismatch

SMALL = ModelConfig(channels=8, heads=2, group_size=8, k_shifts=4, cmln_hidden=6, crpe_hidden=6)


def _zero(arrays):
    for a in arrays:
        a.value = np.zeros_like(a.value)


def test_cmln_identity_modulation_is_layer_norm(rng):
    p = CmlnParams.init(6, rng, hidden=4)
    _zero(p.gamma_w + p.beta_w)
    h = rng.normal(2.0, 3.0, (5, 6))
    out = cmln(h, rng.normal(size=6), p, eps=1e-12).value
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-9)


def test_cmln_zero_gamma_gives_beta(rng):
    p = CmlnParams.init(6, rng, hidden=4)
    _zero(p.gamma_w + p.gamma_b)
    ctx = rng.normal(size=6)
    out_a = cmln(rng.normal(size=(4, 6)), ctx, p).value
    out_b = cmln(rng.normal(size=(4, 6)), ctx, p).value
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(out_a[0], out_a[3])


def test_cmln_context_sensitivity(rng):
    p = CmlnParams.init(6, rng, hidden=4)
    h = rng.normal(size=(4, 6))
    ctx = rng.normal(size=6)
    a = cmln(h, ctx, p).value
    b = cmln(h, ctx + rng.normal(0, 0.5, 6), p).value
    assert np.max(np.abs(a - b)) > 0


def test_cmln_shapes(rng):
    p = CmlnParams.init(6, rng)
    with pytest.raises(ShapeMismatch):
        cmln(np.zeros((3, 6)), np.zeros(5), p)


def _block_setup(grid, cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    w = BlockWeights(cfg, rng, "b")
    scene = SceneContext.build(grid, cfg)
    dense = rng.normal(size=(grid.num_voxels, cfg.channels))
    return w, scene, dense


def test_zero_conv_returns_post_cmln_scatter(small_grid):
    w, scene, dense = _block_setup(small_grid)
    _zero([w.conv_w, w.conv_b])
    out = block_forward(dense, scene, w, SMALL, 1.0).value
    empty = np.setdiff1d(np.arange(small_grid.num_voxels), small_grid.occupied)
    np.testing.assert_array_equal(out[empty], dense[empty])
    assert not np.allclose(out[small_grid.occupied], dense[small_grid.occupied])


def test_residual_wiring_with_zero_asa_and_ffn(small_grid):
    w, scene, dense = _block_setup(small_grid)
    _zero([*w.attn.arrays(), w.ffn_w1, w.ffn_b1, w.ffn_w2, w.ffn_b2, w.conv_w, w.conv_b])
    out = block_forward(dense, scene, w, SMALL, 1.0).value
    x = dense[small_grid.occupied]
    expected = cmln(x, x.mean(axis=0), w.cmln).value
    np.testing.assert_allclose(out[small_grid.occupied], expected, atol=1e-12)


def test_block_preserves_dims(small_grid):
    w, scene, dense = _block_setup(small_grid)
    assert block_forward(dense, scene, w, SMALL, 0.5).shape == dense.shape
    with pytest.raises(ShapeMismatch):
        block_forward(dense[:, :4], scene, w, SMALL, 0.5)


def test_block_without_asa_is_conv_only(small_grid):
    cfg = SMALL.replace(use_asa=False)
    w, scene, dense = _block_setup(small_grid, cfg)
    _zero([w.conv_w, w.conv_b])
    np.testing.assert_array_equal(block_forward(dense, scene, w, cfg, 1.0).value, dense)


def test_block_deterministic(small_grid):
    outs = []
    for _ in range(2):
        w, scene, dense = _block_setup(small_grid, seed=3)
        outs.append(block_forward(dense, scene, w, SMALL, 1.0, rng=np.random.default_rng(9)).value)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_model_logits_shape(room):
    model = SceneModel(ModelConfig(), room.channels, room.num_classes, seed=0)
    logits = model.forward(room)
    assert logits.shape == (512, 4)
    probs = nc.softmax(logits, axis=1).value
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_model_trace_records_shifts(room):
    model = SceneModel(ModelConfig(), room.channels, room.num_classes, seed=0)
    trace = {}
    model.forward(room, rng=np.random.default_rng(0), trace=trace)
    assert len(trace["shifts"]) == 2
    assert all(s in (0, 8, 16, 24) for s in trace["shifts"])


def test_model_rejects_wrong_channels(small_grid):
    model = SceneModel(SMALL, 3, small_grid.num_classes)
    with pytest.raises(ShapeMismatch):
        model.forward(small_grid)


def test_checkpoint_roundtrip(tmp_path, room):
    model = SceneModel(SMALL, room.channels, room.num_classes, seed=1)
    path = tmp_path / "w.vswt"
    write_checkpoint(model.state_dict(), path)
    other = SceneModel(SMALL, room.channels, room.num_classes, seed=2)
    other.load_state_dict(read_checkpoint(path))
    np.testing.assert_array_equal(model.forward(room).value, other.forward(room).value)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.vswt"
    write_checkpoint({"ab": np.array([[1.5, 2.0]])}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"VSWT"
    assert raw[4:10] == b"\x01\x00\x01\x00\x00\x00"
    assert raw[10:14] == b"\x02\x00ab"
    assert raw[14:23] == b"\x02\x01\x00\x00\x00\x02\x00\x00\x00"
    assert np.frombuffer(raw[23:], "<f8").tolist() == [1.5, 2.0]


def test_checkpoint_rejects_corruption(tmp_path, room):
    model = SceneModel(SMALL, room.channels, room.num_classes)
    path = tmp_path / "w.vswt"
    write_checkpoint(model.state_dict(), path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FileFormatError):
        read_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FileFormatError):
        read_checkpoint(path)
    bad = dict(model.state_dict())
    bad.pop("head.w")
    with pytest.raises(FileFormatError):
        model.load_state_dict(bad)


@pytest.mark.parametrize("report", block_suite(), ids=lambda r: r.name)
def test_block_gradients(report):
    assert report.passed, report.line()
