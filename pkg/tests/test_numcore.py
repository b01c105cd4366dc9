import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxelser import numcore as nc
from voxelser.checks import numcore_suite
from voxelser.errors import BackwardBeforeForward, NonDeterministicFunction, ShapeMismatch
from voxelser.numcore import DiffArray, Tape, gradcheck


def test_softmax_uniform():
    out = nc.softmax(DiffArray([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.value, [1 / 3] * 3, rtol=0, atol=1e-15)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = nc.softmax(DiffArray(x), axis=1).value
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_layer_norm_moments(rng):
    x = rng.normal(3.0, 5.0, size=(4, 64))
    out = nc.layer_norm(DiffArray(x), eps=1e-12).value
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-9)


def test_sum_of_squares_gradient():
    x = DiffArray([1.0, 2.0], requires_grad=True)
    report = gradcheck(lambda a: nc.sum(nc.mul(a, a)), [x], tol=1e-8)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert report.passed and report.max_rel_error < 1e-8


def test_constant_function_zero_gradient():
    x = DiffArray([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = nc.add(nc.mul(x, 0.0), 5.0)
        loss = nc.sum(y)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_gradient_accumulates_over_uses():
    x = DiffArray([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nc.add(nc.sum(x), nc.sum(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_twice_is_error():
    x = DiffArray([1.0], requires_grad=True)
    with Tape() as tape:
        loss = nc.sum(nc.mul(x, 3.0))
    tape.backward(loss)
    with pytest.raises(BackwardBeforeForward):
        tape.backward(loss)


def test_backward_without_forward_is_error():
    x = DiffArray([1.0], requires_grad=True)
    tape = Tape()
    with pytest.raises(BackwardBeforeForward):
        tape.backward(x)


def test_backward_runs_in_reverse_order():
    seen = []
    x = DiffArray([2.0], requires_grad=True)
    with Tape() as tape:
        a = nc.mul(x, 3.0)
        b = nc.exp(a)
    for rec in tape._records:
        orig = rec.backward
        rec.backward = (lambda f, r: (lambda g: (seen.append(r.out), f(g))[1]))(orig, rec)
    tape.backward(b)
    assert seen == [b, a]


def test_no_tape_no_recording():
    x = DiffArray([1.0], requires_grad=True)
    y = nc.mul(x, 2.0)
    assert not y.requires_grad


def test_conv3d_identity_kernel(rng):
    x = rng.normal(size=(5, 4, 6, 3))
    k = np.zeros((3, 3, 3, 3, 3))
    k[1, 1, 1] = np.eye(3)
    out = nc.conv3d(DiffArray(x), DiffArray(k)).value
    np.testing.assert_array_equal(out[1:-1, 1:-1, 1:-1], x[1:-1, 1:-1, 1:-1])
    np.testing.assert_allclose(out, x)


def test_conv3d_matches_direct_loop(rng):
    x = rng.normal(size=(3, 4, 2, 2))
    k = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    out = nc.conv3d(DiffArray(x), DiffArray(k), DiffArray(b)).value
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((3, 4, 2, 3))
    for z in range(3):
        for y in range(4):
            for w in range(2):
                patch = xp[z:z + 3, y:y + 3, w:w + 3]
                ref[z, y, w] = np.einsum("ijkc,ijkco->o", patch, k) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_atan2_matches_numpy():
    a = DiffArray([1.0, -1.0, 0.0])
    b = DiffArray([0.0, 1.0, 1.0])
    np.testing.assert_array_equal(nc.atan2(a, b).value, np.arctan2(a.value, b.value))


def test_straight_through_value_is_exact():
    soft = nc.softmax(DiffArray([0.1, 0.7, 0.2]))
    y = nc.straight_through([0.0, 1.0, 0.0], soft)
    assert y.value.tolist() == [0.0, 1.0, 0.0]


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        nc.add(DiffArray(np.ones((2, 3))), DiffArray(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        nc.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        nc.concat([DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 4)))], axis=0)
    with pytest.raises(ValueError):
        nc.layer_norm(DiffArray(np.ones(3)), eps=0.0)


def test_gradcheck_detects_nondeterminism():
    rng = np.random.default_rng(0)
    x = DiffArray([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonDeterministicFunction):
        gradcheck(lambda a: nc.sum(nc.mul(a, rng.normal())), [x])


def test_gradcheck_catches_wrong_gradient():
    def bad_square(a):
        out = DiffArray(a.value ** 2)
        tape = nc.current_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, (a,), lambda g: (g * a.value,))  # missing factor 2
        return nc.sum(out)

    report = gradcheck(bad_square, [DiffArray([1.0, 3.0], requires_grad=True)])
    assert not report.passed


@pytest.mark.parametrize("report", numcore_suite(), ids=lambda r: r.name)
def test_op_gradients(report):
    assert report.passed, report.line()
