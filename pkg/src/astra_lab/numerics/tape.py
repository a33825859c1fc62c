"""Reverse-mode automatic differentiation on a define-by-run tape.

Values are 64-bit numpy arrays.  Operations record themselves on the
currently active :class:`Tape`; without an active tape they evaluate
eagerly and carry no graph.  A tape is rebuilt for every training step,
which keeps variable-length recurrent unrolls simple.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = ["Tape", "Node", "Parameter", "ShapeError", "active_tape"]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class Parameter:
    """A named trainable array.  Gradients are written by Tape.backward."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name=""):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    """One value in the computation graph.

    ``parents`` is a tuple of ``(parent_node, vjp)`` pairs where ``vjp``
    maps the output cotangent to the parent's cotangent.
    """

    __slots__ = ("value", "parents", "param", "grad")

    def __init__(self, value, parents=(), param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.param = param
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


# one tape stack per thread so parallel training runs don't interleave
_LOCAL = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self

    def record(self, value, parents=(), param=None):
        node = Node(value, parents, param)
        self.nodes.append(node)
        return node

    def leaf(self, param: Parameter) -> Node:
        """Node for a trainable parameter; one node per parameter per tape."""
        node = self._leaves.get(id(param))
        if node is None:
            node = self.record(param.value, param=param)
            self._leaves[id(param)] = node
        return node

    def backward(self, root: Node) -> dict[Parameter, np.ndarray]:
        """Accumulate gradients of the scalar ``root`` w.r.t. every leaf.

        Returns a dict mapping every parameter touched by this tape to its
        gradient (untouched leaves simply do not appear; callers that need
        exact zeros use :meth:`gradients`).  Also writes ``param.grad``.
        """
        if root.value.size != 1:
            raise ValueError(
                f"backward root must be scalar, got shape {root.value.shape}"
            )
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.grad += contrib
        grads: dict[Parameter, np.ndarray] = {}
        for node in self._leaves.values():
            param = node.param
            g = node.grad if node.grad is not None else np.zeros_like(node.value)
            if param in grads:
                grads[param] = grads[param] + g
            else:
                grads[param] = g
            param.grad = grads[param]
        return grads

    def gradients(self, root: Node, params) -> dict[Parameter, np.ndarray]:
        """Like backward but guarantees an (exactly zero) entry per param."""
        grads = self.backward(root)
        out = {}
        for p in params:
            out[p] = grads.get(p, np.zeros_like(p.value))
            p.grad = out[p]
        return out
