"""Small neural building blocks: MLP, GRU cell, diagonal-Gaussian head.

All forwards operate on batched 2-D arrays of shape (batch, features) and
are expressed in tape ops so they are differentiable end to end.
Initialization is uniform in +-1/sqrt(fan_in) with zero biases, fully
determined by the module's RNG.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Parameter, ops
from .numerics.ops import Node

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 2.0

LOG_2PI = math.log(2.0 * math.pi)


class Module:
    """Base: a flat, ordered mapping of parameter names to Parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def _add(self, name, array) -> Parameter:
        p = Parameter(array, name)
        self._params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def adopt(self, prefix: str, child: "Module"):
        """Merge a child module's parameters under a name prefix."""
        for name, p in child.named_parameters().items():
            full = f"{prefix}.{name}"
            p.name = full
            self._params[full] = p


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Mlp(Module):
    """Affine + tanh stack; identity output activation.

    ``widths`` is the full layer-size list (>= 2 entries).  When
    ``zero_last`` is set the final affine layer starts at exactly zero so
    the network's initial output is zero regardless of input.
    """

    def __init__(self, widths, rng, zero_last=False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"Mlp widths must be positive, got {widths}")
        self.widths = list(widths)
        self.W = []
        self.b = []
        last = len(widths) - 2
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_last and i == last:
                w = np.zeros((n_in, n_out))
            else:
                w = _uniform_init(rng, n_in, (n_in, n_out))
            self.W.append(self._add(f"W{i}", w))
            self.b.append(self._add(f"b{i}", np.zeros((1, n_out))))

    def forward(self, x) -> Node:
        x = ops.as_node(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.widths[0]:
            raise ValueError(
                f"Mlp input width {x.value.shape} does not match spec width "
                f"{self.widths[0]}"
            )
        h = x
        n_layers = len(self.W)
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = ops.add(ops.matmul(h, ops.leaf(W)), ops.leaf(b))
            if i < n_layers - 1:
                h = ops.tanh(h)
        return h

    __call__ = forward


class GruCell(Module):
    """Standard GRU recurrence with update/reset/candidate gates."""

    def __init__(self, input_size, hidden_size, rng):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        for gate in ("z", "r", "n"):
            self._add(f"W{gate}", _uniform_init(rng, input_size, (input_size, hidden_size)))
            self._add(f"U{gate}", _uniform_init(rng, hidden_size, (hidden_size, hidden_size)))
            self._add(f"b{gate}", np.zeros((1, hidden_size)))

    def step(self, h_prev, x) -> Node:
        h_prev = ops.as_node(h_prev)
        x = ops.as_node(x)
        if x.value.shape[1] != self.input_size:
            raise ValueError(
                f"GRU input size {x.value.shape[1]} != {self.input_size}"
            )
        if h_prev.value.shape[1] != self.hidden_size:
            raise ValueError(
                f"GRU hidden size {h_prev.value.shape[1]} != {self.hidden_size}"
            )
        p = self._params
        z = ops.sigmoid(ops.add(ops.add(ops.matmul(x, ops.leaf(p["Wz"])),
                                        ops.matmul(h_prev, ops.leaf(p["Uz"]))),
                                ops.leaf(p["bz"])))
        r = ops.sigmoid(ops.add(ops.add(ops.matmul(x, ops.leaf(p["Wr"])),
                                        ops.matmul(h_prev, ops.leaf(p["Ur"]))),
                                ops.leaf(p["br"])))
        n = ops.tanh(ops.add(ops.add(ops.matmul(x, ops.leaf(p["Wn"])),
                                     ops.matmul(ops.mul(r, h_prev), ops.leaf(p["Un"]))),
                             ops.leaf(p["bn"])))
        # h = (1 - z) * n + z * h_prev
        one_minus_z = ops.sub(1.0, z)
        return ops.add(ops.mul(one_minus_z, n), ops.mul(z, h_prev))

    def zero_state(self, batch) -> np.ndarray:
        return np.zeros((batch, self.hidden_size))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else _uniform_init(rng, n_in, (n_in, n_out))
        self.W = self._add("W", w)
        self.b = self._add("b", np.zeros((1, n_out)))

    def forward(self, x) -> Node:
        return ops.add(ops.matmul(ops.as_node(x), ops.leaf(self.W)), ops.leaf(self.b))

    __call__ = forward


class GaussianHead(Module):
    """MLP emitting (mean, clamped log-variance) for a diagonal Gaussian."""

    def __init__(self, n_in, n_out, hidden, rng,
                 log_var_min=LOG_VAR_MIN, log_var_max=LOG_VAR_MAX):
        super().__init__()
        self.n_out = n_out
        self.log_var_min = log_var_min
        self.log_var_max = log_var_max
        self._mlp = Mlp([n_in, hidden, 2 * n_out], rng)
        self.adopt("mlp", self._mlp)

    def forward(self, x):
        out = self._mlp(x)
        mu = ops.getitem(out, (slice(None), slice(0, self.n_out)))
        log_var = ops.clip(
            ops.getitem(out, (slice(None), slice(self.n_out, 2 * self.n_out))),
            self.log_var_min, self.log_var_max,
        )
        return mu, log_var

    __call__ = forward


def gaussian_nll(z, mu, log_var) -> Node:
    """Negative log-likelihood of ``z`` under a diagonal Gaussian.

    0.5 * sum_j [(z_j - mu_j)^2 / sigma_j^2 + log sigma_j^2 + log 2pi],
    summed over feature axis and batch.
    """
    z, mu, log_var = ops.as_node(z), ops.as_node(mu), ops.as_node(log_var)
    for name, v in (("z", z), ("mu", mu), ("log_var", log_var)):
        if not np.all(np.isfinite(v.value)):
            raise FloatingPointError(f"non-finite {name} in gaussian_nll")
    if not (z.value.shape == mu.value.shape == log_var.value.shape):
        raise ValueError(
            f"gaussian_nll shapes differ: {z.value.shape}, {mu.value.shape}, "
            f"{log_var.value.shape}"
        )
    inv_var = ops.exp(ops.neg(log_var))
    sq = ops.mul(ops.square(ops.sub(z, mu)), inv_var)
    per_elem = ops.add(ops.add(sq, log_var), LOG_2PI)
    return ops.mul(ops.sum(per_elem), 0.5)
