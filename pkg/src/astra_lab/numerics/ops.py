"""Differentiable primitives.

Every function accepts :class:`Node` or plain array-likes, returns a
:class:`Node`, and records itself on the active tape (if any).  Primitives
check shapes up front and raise :class:`ShapeError` naming the primitive
and both shapes.
"""

from __future__ import annotations

import numpy as np

from .tape import Node, Parameter, ShapeError, active_tape

__all__ = [
    "as_node", "constant", "leaf", "matmul", "add", "sub", "mul", "div",
    "neg", "tanh", "sigmoid", "exp", "log", "square", "pow_const", "sum",
    "mean", "concat", "getitem", "reshape", "clip", "maximum", "minimum",
    "stop_gradient", "softplus", "transpose",
]


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return leaf(x)
    return Node(np.asarray(x, dtype=np.float64))


constant = as_node


def leaf(param: Parameter) -> Node:
    tape = active_tape()
    if tape is None:
        return Node(param.value, param=param)
    return tape.leaf(param)


def _make(value, parents) -> Node:
    tape = active_tape()
    if tape is None:
        return Node(value)
    return tape.record(value, parents)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape} do not conform")
    out = a.value @ b.value
    return _make(out, (
        (a, lambda g, bv=b.value: g @ bv.T),
        (b, lambda g, av=a.value: av.T @ g),
    ))


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a.value, b.value)
    return _make(a.value + b.value, (
        (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.value.shape: _unbroadcast(g, s)),
    ))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a.value, b.value)
    return _make(a.value - b.value, (
        (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.value.shape: -_unbroadcast(g, s)),
    ))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a.value, b.value)
    return _make(a.value * b.value, (
        (a, lambda g, o=b.value, s=a.value.shape: _unbroadcast(g * o, s)),
        (b, lambda g, o=a.value, s=b.value.shape: _unbroadcast(g * o, s)),
    ))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a.value, b.value)
    out = a.value / b.value
    return _make(out, (
        (a, lambda g, bv=b.value, s=a.value.shape: _unbroadcast(g / bv, s)),
        (b, lambda g, bv=b.value, o=out, s=b.value.shape:
            _unbroadcast(-g * o / bv, s)),
    ))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, ((a, lambda g: -g),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, ((a, lambda g, o=out: g * (1.0 - o * o)),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _make(out, ((a, lambda g, o=out: g * o * (1.0 - o)),))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, ((a, lambda g, o=out: g * o),))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), ((a, lambda g, v=a.value: g / v),))


def softplus(a) -> Node:
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    return _make(out, ((a, lambda g, v=a.value: g * 0.5 * (np.tanh(0.5 * v) + 1.0)),))


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, ((a, lambda g, v=a.value: 2.0 * g * v),))


def pow_const(a, c: float) -> Node:
    a = as_node(a)
    out = a.value ** c
    return _make(out, ((a, lambda g, v=a.value: g * c * v ** (c - 1.0)),))


def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors np.sum
    a = as_node(a)
    out = a.value.sum(axis=axis)

    def vjp(g, v=a.value, ax=axis):
        if ax is None:
            return np.broadcast_to(g, v.shape).astype(np.float64)
        return np.broadcast_to(np.expand_dims(g, ax), v.shape).astype(np.float64)

    return _make(out, ((a, vjp),))


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def concat(parts, axis=-1) -> Node:
    nodes = [as_node(p) for p in parts]
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
        def vjp(g, lo=lo, hi=hi, ax=axis):
            index = [slice(None)] * g.ndim
            index[ax] = slice(lo, hi)
            return g[tuple(index)]
        parents.append((node, vjp))
    return _make(out, tuple(parents))


def getitem(a, index) -> Node:
    a = as_node(a)
    out = a.value[index]

    def vjp(g, v=a.value, idx=index):
        full = np.zeros_like(v)
        np.add.at(full, idx, g)
        return full

    return _make(out, ((a, vjp),))


def reshape(a, shape) -> Node:
    a = as_node(a)
    out = a.value.reshape(shape)
    return _make(out, ((a, lambda g, s=a.value.shape: g.reshape(s)),))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {a.value.shape}")
    return _make(a.value.T.copy(), ((a, lambda g: g.T),))


def clip(a, lo, hi) -> Node:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_node(a)
    out = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(out, ((a, lambda g, m=inside: g * m),))


def maximum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("maximum", a.value, b.value)
    pick_a = a.value >= b.value
    return _make(np.maximum(a.value, b.value), (
        (a, lambda g, m=pick_a, s=a.value.shape: _unbroadcast(g * m, s)),
        (b, lambda g, m=~pick_a, s=b.value.shape: _unbroadcast(g * m, s)),
    ))


def minimum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("minimum", a.value, b.value)
    pick_a = a.value <= b.value
    return _make(np.minimum(a.value, b.value), (
        (a, lambda g, m=pick_a, s=a.value.shape: _unbroadcast(g * m, s)),
        (b, lambda g, m=~pick_a, s=b.value.shape: _unbroadcast(g * m, s)),
    ))


def stop_gradient(a) -> Node:
    a = as_node(a)
    return _make(a.value.copy(), ())
