"""Minimal reverse-mode differentiation on numpy float64 arrays.

Usage::

    x = DiffArray(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = nc.sum(nc.mul(x, x))
    tape.backward(loss)
    x.grad  # -> [2., 2., 2.]

Operations executed while a :class:`Tape` is active and at least one input
requires a gradient are recorded; everything else runs as plain numpy.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BackwardBeforeForward, NonDeterministicFunction, ShapeMismatch

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffArray:
    """A float64 value buffer paired with an accumulated-gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = bool(requires_grad)
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffArray{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Record:
    out: DiffArray
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager around the forward pass, then call
    :meth:`backward` exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: DiffArray, inputs, backward) -> None:
        if self._consumed:
            raise BackwardBeforeForward("tape already consumed by backward(); start a new tape")
        self._records.append(_Record(out, tuple(inputs), backward))
        self._outputs.add(id(out))

    def backward(self, loss: DiffArray, seed=None) -> None:
        if self._consumed:
            raise BackwardBeforeForward("backward() already ran on this tape")
        if id(loss) not in self._outputs:
            raise BackwardBeforeForward("loss was not produced by a forward pass on this tape")
        self._consumed = True
        loss.grad = loss.grad + (np.ones_like(loss.value) if seed is None else np.asarray(seed, float))
        for rec in reversed(self._records):
            grads = rec.backward(rec.out.grad)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad += g


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(value, inputs, backward) -> DiffArray:
    out = DiffArray(value)
    tape = current_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * out / b.value, b.shape)))


def exp(a) -> DiffArray:
    a = _lift(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> DiffArray:
    a = _lift(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> DiffArray:
    a = _lift(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> DiffArray:
    a = _lift(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def atan2(a, b) -> DiffArray:
    """Elementwise ``atan2(a, b)``; undefined gradient at ``a = b = 0``."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "atan2")
    r2 = a.value ** 2 + b.value ** 2
    return _result(np.arctan2(a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(g * b.value / r2, a.shape),
                              _unbroadcast(-g * a.value / r2, b.shape)))


def stop_gradient(a) -> DiffArray:
    return DiffArray(_lift(a).value)


def straight_through(hard, soft) -> DiffArray:
    """Forward value is exactly ``hard``; the gradient passes to ``soft``."""
    soft = _lift(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeMismatch(f"straight_through: {hard.shape} vs {soft.shape}")
    return _result(hard.copy(), (soft,), lambda g: (g,))


# -- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> DiffArray:
    """``np.matmul`` for operands with ndim >= 2 (batch dims may broadcast)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward)


def linear(x, weight, bias=None) -> DiffArray:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mlp_forward(x, weights: Sequence, biases: Sequence, activation=relu) -> DiffArray:
    """Affine layers with ``activation`` between them (none after the last)."""
    if len(weights) != len(biases):
        raise ShapeMismatch("mlp_forward: weights and biases differ in length")
    h = _lift(x)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = linear(h, w, b)
        if i < len(weights) - 1:
            h = activation(h)
    return h


# -- normalisation -----------------------------------------------------------

def softmax(a, axis: int = -1) -> DiffArray:
    a = _lift(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> DiffArray:
    a = _lift(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> DiffArray:
    """Normalise to zero mean and unit variance along ``axis`` (no affine)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = _lift(a)
    n = a.shape[axis]
    mu = a.value.mean(axis=axis, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).sum(axis=axis, keepdims=True) / n
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape) -> DiffArray:
    a = _lift(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> DiffArray:
    a = _lift(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [_lift(x) for x in arrays]
    try:
        out = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _result(out, tuple(arrays), lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a, key) -> DiffArray:
    """``a[key]`` for basic slices or integer index arrays."""
    a = _lift(a)

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, key, g)
        return (ga,)

    return _result(a.value[key], (a,), backward)


def take(a, rows, axis: int = 0) -> DiffArray:
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(np.moveaxis(ga, axis, 0), rows, np.moveaxis(g, axis, 0))
        return (ga,)

    return _result(np.take(a.value, rows, axis=axis), (a,), backward)


def slice_rows(a, start: int, stop: int) -> DiffArray:
    return index(a, (slice(start, stop),))


def scatter_rows(base, rows, values) -> DiffArray:
    """Copy of ``base`` with ``base[rows] = values`` (rows must be unique)."""
    base, values = _lift(base), _lift(values)
    rows = np.asarray(rows, dtype=np.int64)
    if values.shape != (rows.size,) + base.shape[1:]:
        raise ShapeMismatch(f"scatter_rows: values {values.shape} for {rows.size} rows of {base.shape}")
    out = base.value.copy()
    out[rows] = values.value

    def backward(g):
        gb = g.copy()
        gb[rows] = 0.0
        return (gb, g[rows])

    return _result(out, (base, values), backward)


# -- convolution -------------------------------------------------------------

def conv3d(x, weight, bias=None) -> DiffArray:
    """Stride-1, zero-padded 3D convolution (cross-correlation).

    ``x`` is ``(Z, Y, X, Cin)``, ``weight`` is ``(k, k, k, Cin, Cout)`` with odd
    ``k``; the output keeps the spatial dims of the input.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeMismatch(f"conv3d expects (Z,Y,X,C) input and 5-D kernel, got {x.shape}, {weight.shape}")
    k = weight.shape[0]
    if weight.shape[:3] != (k, k, k) or k % 2 == 0 or weight.shape[3] != x.shape[3]:
        raise ShapeMismatch(f"conv3d kernel {weight.shape} incompatible with input {x.shape}")
    p = k // 2
    Z, Y, X, cin = x.shape
    cout = weight.shape[4]
    xp = np.pad(x.value, ((p, p), (p, p), (p, p), (0, 0)))
    out = np.zeros((Z, Y, X, cout))
    taps = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]
    for i, j, l in taps:
        out += xp[i:i + Z, j:j + Y, l:l + X] @ weight.value[i, j, l]
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        out += bias.value
        inputs.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, l in taps:
                gxp[i:i + Z, j:j + Y, l:l + X] += g @ weight.value[i, j, l].T
            gx = gxp[p:p + Z, p:p + Y, p:p + X]
        if weight.requires_grad:
            gw = np.zeros_like(weight.value)
            g2 = g.reshape(-1, cout)
            for i, j, l in taps:
                gw[i, j, l] = xp[i:i + Z, j:j + Y, l:l + X].reshape(-1, cin).T @ g2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _result(out, tuple(inputs), backward)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradcheckReport:
    name: str
    tol: float
    max_rel_error: float = 0.0
    checked: int = 0
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"check={self.name} elements={self.checked} "
                f"max_rel_err={self.max_rel_error:.3e} tol={self.tol:g} status={status}")


def gradcheck(f: Callable[..., DiffArray], inputs: Sequence[DiffArray], h: float = 1e-5,
              tol: float = 1e-4, max_elements: int | None = None, seed: int = 0,
              name: str = "gradcheck") -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` against central
    finite differences.

    The error per element is ``|g_analytic - g_fd| / max(1, |g_fd|)``.  With
    ``max_elements`` set, at most that many entries per input are probed,
    chosen with a seeded generator.
    """
    for x in inputs:
        x.zero_grad()
        x.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ShapeMismatch(f"gradcheck needs a scalar output, got shape {out.shape}")
    tape.backward(out)
    analytic = [x.grad.copy() for x in inputs]

    def value() -> float:
        return float(f(*inputs).value.reshape(()))

    base = value()
    if value() != base or float(out.value.reshape(())) != base:
        raise NonDeterministicFunction(f"{name}: repeated forward passes disagree")

    rng = np.random.default_rng(seed)
    report = GradcheckReport(name, tol)
    for pos, (x, ga) in enumerate(zip(inputs, analytic)):
        flat = x.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(ga.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        report.per_input[x.name or f"input{pos}"] = worst
        report.checked += int(idx.size)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
