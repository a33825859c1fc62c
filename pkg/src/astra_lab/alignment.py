"""Aligning a target-history encoder with the grounded latent space.

The grounding model's encoder works on abstract states, which exist only
inside the simulator.  For deployment we need an encoder that maps raw
target-environment histories to the same latent space.  This module
trains that target encoder by minimizing the maximum mean discrepancy
(MMD) between

* samples of the latent transition head evaluated at source latents
  (frozen grounding stack, one sample per matched transition), and
* next latents produced by the target encoder on the raw histories,

over matched (history, action) pairs from the offline dataset.  Only the
target encoder's parameters are updated; the source stack is frozen and
checked bitwise.

The abstraction map is a coordinate projection in every environment
pair, so the target encoder can be warm-started to replicate the source
encoder exactly: copy weights on the projected input coordinates, zeros
on the extra ones.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset
from .envs import EnvPair
from .grounding import AstraModel, _STD_FLOOR
from .nn import GruCell, Linear, Module
from .numerics import Adam, Tape, ops

log = logging.getLogger(__name__)

BANDWIDTH_MULTIPLIERS = (0.5, 1.0, 2.0)


# ---------------------------------------------------------------------------
# maximum mean discrepancy

def _pairwise_sq_dists(x, y):
    """Differentiable matrix of squared Euclidean distances."""
    x, y = ops.as_node(x), ops.as_node(y)
    xx = ops.sum(ops.square(x), axis=1)           # (n,)
    yy = ops.sum(ops.square(y), axis=1)           # (m,)
    n, m = x.value.shape[0], y.value.shape[0]
    cross = ops.matmul(x, ops.transpose(y))       # (n, m)
    d2 = ops.add(ops.sub(ops.reshape(xx, (n, 1)), ops.mul(cross, 2.0)),
                 ops.reshape(yy, (1, m)))
    # clamp tiny negative values from cancellation
    return ops.maximum(d2, 0.0)


def mmd2(x, y, bandwidths):
    """Biased V-statistic estimate of squared MMD with an RBF kernel.

    k(a, b) = sum_h exp(-||a - b||^2 / (2 h^2)); the estimate is
    mean k(x, x') + mean k(y, y') - 2 mean k(x, y).
    """
    x, y = ops.as_node(x), ops.as_node(y)
    if x.value.ndim != 2 or y.value.ndim != 2:
        raise ValueError("mmd2 expects 2-D sample sets")
    if x.value.shape[0] == 0 or y.value.shape[0] == 0:
        raise ValueError("mmd2: empty sample set")
    if x.value.shape[1] != y.value.shape[1]:
        raise ValueError(
            f"mmd2: feature dims differ: {x.value.shape} vs {y.value.shape}")
    bandwidths = [float(h) for h in np.atleast_1d(bandwidths)]
    if any(h <= 0 for h in bandwidths):
        raise ValueError("mmd2 bandwidths must be positive")

    def kernel_mean(a, b):
        d2 = _pairwise_sq_dists(a, b)
        total = None
        for h in bandwidths:
            k = ops.exp(ops.mul(d2, -1.0 / (2.0 * h * h)))
            total = k if total is None else ops.add(total, k)
        return ops.mean(ops.reshape(total, (-1,)))

    return ops.add(ops.sub(kernel_mean(x, x), ops.mul(kernel_mean(x, y), 2.0)),
                   kernel_mean(y, y))


def median_heuristic(x, y, multipliers=BANDWIDTH_MULTIPLIERS):
    """Bandwidth list: median pairwise distance of the pooled sample,
    scaled by the multipliers."""
    pooled = np.concatenate([np.asarray(x, dtype=np.float64),
                             np.asarray(y, dtype=np.float64)])
    diffs = pooled[:, None, :] - pooled[None, :, :]
    d = np.sqrt((diffs ** 2).sum(axis=2))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu]))
    if med <= 0:
        med = 1.0
    return [m * med for m in multipliers]


# ---------------------------------------------------------------------------
# target encoder

class TargetEncoder(Module):
    """GRU over (raw target observation, previous action) with a linear
    projection into the grounded latent space."""

    def __init__(self, obs_dim, action_dim, seed=0, latent_dim=32, hidden=64):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
        self.gru = GruCell(obs_dim + action_dim, hidden, rng)
        self.proj = Linear(hidden, latent_dim, rng)
        self.adopt("gru", self.gru)
        self.adopt("proj", self.proj)
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)

    def fit_normalizer(self, dataset: Dataset, indices=None):
        if indices is None:
            indices = dataset.train_indices() or range(len(dataset))
        stacked = np.concatenate(
            [dataset.trajectories[i].states for i in indices])
        self.obs_mean = stacked.mean(axis=0)
        self.obs_std = np.maximum(stacked.std(axis=0), _STD_FLOOR)

    def warm_start(self, model: AstraModel, dataset: Dataset):
        """Replicate the source encoder on the projected coordinates.

        The abstraction map is the projection onto the first ``abs_dim``
        observation entries, so copying the source input rows there (and
        the source normalization stats), zeroing the extra input rows,
        and copying the recurrent weights makes this encoder compute
        exactly the source encoder applied to the projected history.
        """
        d = model.abs_dim
        if d > self.obs_dim or model.action_dim != self.action_dim:
            raise ValueError("warm_start: incompatible dimensions")
        self.fit_normalizer(dataset)
        self.obs_mean[:d] = model.abs_mean
        self.obs_std[:d] = model.abs_std
        src = model.encoder_gru.named_parameters()
        dst = self.gru.named_parameters()
        for gate in ("z", "r", "n"):
            W = np.zeros_like(dst[f"W{gate}"].value)
            W_src = src[f"W{gate}"].value
            W[:d] = W_src[:d]
            W[self.obs_dim:] = W_src[d:]          # previous-action rows
            dst[f"W{gate}"].value = W
            dst[f"U{gate}"].value = src[f"U{gate}"].value.copy()
            dst[f"b{gate}"].value = src[f"b{gate}"].value.copy()
        self.proj.W.value = model.encoder_out.W.value.copy()
        self.proj.b.value = model.encoder_out.b.value.copy()

    def normalize(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def init_hidden(self, batch):
        return self.gru.zero_state(batch)

    def _inputs(self, obs, prev_action):
        return np.concatenate([self.normalize(np.atleast_2d(obs)),
                               np.atleast_2d(prev_action)], axis=1)

    def encode_step(self, h, obs, prev_action):
        """One eager step over a batch; returns (h_next, z)."""
        h_next = self.gru.step(h, self._inputs(obs, prev_action)).value
        z = self.proj(h_next).value
        return h_next, z

    def encode_history(self, states, actions):
        """Latent after consuming states[0..t] with preceding actions.

        Returns the (T, latent) array of latents, one per state prefix.
        ``actions`` has one row fewer than ``states``.
        """
        states = np.atleast_2d(states)
        T = states.shape[0]
        h = self.init_hidden(1)
        prev_a = np.zeros(self.action_dim)
        zs = np.zeros((T, self.latent_dim))
        for t in range(T):
            h, z = self.encode_step(h, states[t][None], prev_a[None])
            zs[t] = z[0]
            if t < T - 1 and len(actions) > t:
                prev_a = np.asarray(actions[t])
        return zs

    def state_arrays(self):
        out = {name: p.value for name, p in self.named_parameters().items()}
        out["norm.obs_mean"] = self.obs_mean
        out["norm.obs_std"] = self.obs_std
        return out

    def save(self, path):
        ckpt.save_checkpoint(path, self.state_arrays())

    def load(self, path):
        arrays = ckpt.load_checkpoint(path)
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            raise IOError("checkpoint name mismatch: "
                          f"missing {sorted(expected - set(arrays))}, "
                          f"unknown {sorted(set(arrays) - expected)}")
        for name, p in self.named_parameters().items():
            if arrays[name].size != p.value.size:
                raise IOError(f"checkpoint shape mismatch for {name!r}")
            p.value = arrays[name].reshape(p.value.shape)
        self.obs_mean = arrays["norm.obs_mean"]
        self.obs_std = arrays["norm.obs_std"]


# ---------------------------------------------------------------------------
# alignment training

def _source_latents(model: AstraModel, dataset: Dataset, pair: EnvPair,
                    indices):
    """Eager sweep of the frozen source encoder over projected histories.

    Returns per-trajectory arrays of latents z^s_t for t = 0..T-1.
    """
    out = {}
    for i in indices:
        traj = dataset.trajectories[i]
        T = len(traj)
        s_abs = pair.phi(traj.states)
        h = model.init_hidden(1)
        prev_a = np.zeros(pair.action_dim)
        zs = np.zeros((T, model.latent_dim))
        for t in range(T):
            h, z = model.encode_step(h, s_abs[t][None], prev_a[None])
            zs[t] = z[0]
            prev_a = traj.actions[t]
        out[i] = zs
    return out


def _target_hidden_sweep(encoder: TargetEncoder, dataset: Dataset, indices):
    """Eager batched sweep of the target encoder over full trajectories.

    Returns hidden states per trajectory: (T+1, hidden) with row t the
    hidden state after consuming states[0..t-1] (row 0 is the zero state).
    """
    trajs = [dataset.trajectories[i] for i in indices]
    L = max(len(t) for t in trajs)
    B = len(trajs)
    obs = np.zeros((B, L, encoder.obs_dim))
    prev_a = np.zeros((B, L, encoder.action_dim))
    for k, traj in enumerate(trajs):
        T = len(traj)
        obs[k, :T] = traj.states[:T]
        prev_a[k, 1:T] = traj.actions[:T - 1]
    hidden = np.zeros((B, L + 1, encoder.hidden))
    h = encoder.init_hidden(B)
    for t in range(L):
        h = encoder.gru.step(h, encoder._inputs(obs[:, t], prev_a[:, t])).value
        hidden[:, t + 1] = h
    return {i: hidden[k, :len(trajs[k]) + 1]
            for k, i in enumerate(indices)}


def align(encoder: TargetEncoder, model: AstraModel, dataset: Dataset,
          pair: EnvPair, epochs=30, batch_size=256, batches_per_epoch=8,
          taped_steps=10, lr=1e-4, seed=0, log_path=None,
          bandwidths=None) -> dict:
    """Train the target encoder against the frozen grounding stack.

    Each minibatch samples matched transition indices (trajectory, t with
    t <= T-2), draws one latent-transition sample per source latent, and
    minimizes the MMD between those samples and the target encoder's next
    latents.  The target encoder's recurrence is back-propagated through
    the last ``taped_steps`` steps of each history (earlier steps are an
    eager burn-in).  Raises ``RuntimeError`` if any frozen source
    parameter changes.
    """
    frozen_before = {n: p.value.copy()
                     for n, p in model.named_parameters().items()}
    indices = dataset.train_indices() or list(range(len(dataset)))
    usable = [i for i in indices if len(dataset.trajectories[i]) >= 2]
    if not usable:
        raise ValueError("alignment needs trajectories with >= 2 transitions")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    src_z = _source_latents(model, dataset, pair, usable)
    # transition pool: (traj index, t) with a next state at t+1
    pool = [(i, t) for i in usable
            for t in range(len(dataset.trajectories[i]) - 1)]
    params = encoder.parameters()
    opt = Adam(params, lr=lr)
    history = {"epoch": [], "mmd2": []}
    for epoch in range(epochs):
        epoch_loss = 0.0
        for _ in range(batches_per_epoch):
            picks = [pool[j] for j in
                     rng.integers(len(pool), size=min(batch_size, len(pool)))]
            # source samples: one draw from the latent transition head
            x = np.zeros((len(picks), model.latent_dim))
            for row, (i, t) in enumerate(picks):
                z = src_z[i][t][None]
                a = np.atleast_2d(dataset.trajectories[i].actions[t])
                mu, log_var = model.p_lat(
                    np.concatenate([z, a], axis=1))
                std = np.exp(0.5 * log_var.value[0])
                x[row] = mu.value[0] + std * rng.standard_normal(model.latent_dim)
            # target next latents: burn in eagerly, tape the suffix
            sweep = _target_hidden_sweep(
                encoder, dataset, sorted({i for i, _ in picks}))
            starts = [max(0, t + 2 - taped_steps) for _, t in picks]
            h0 = np.array([sweep[i][s] for (i, _), s in zip(picks, starts)])
            with Tape() as tape:
                h = ops.as_node(h0)
                done = [False] * len(picks)
                z_rows = [None] * len(picks)
                max_len = max(t + 2 - s for (_, t), s in zip(picks, starts))
                for step in range(max_len):
                    obs = np.zeros((len(picks), encoder.obs_dim))
                    prev_a = np.zeros((len(picks), encoder.action_dim))
                    for row, ((i, t), s) in enumerate(zip(picks, starts)):
                        u = s + step
                        if u <= t + 1:
                            traj = dataset.trajectories[i]
                            obs[row] = traj.states[u]
                            if u > 0:
                                prev_a[row] = traj.actions[u - 1]
                    h = encoder.gru.step(h, encoder._inputs(obs, prev_a))
                    z_all = encoder.proj(h)
                    for row, ((i, t), s) in enumerate(zip(picks, starts)):
                        if s + step == t + 1 and not done[row]:
                            done[row] = True
                            z_rows[row] = ops.getitem(
                                z_all, (slice(row, row + 1), slice(None)))
                y = ops.concat(z_rows, axis=0)
                bw = (bandwidths if bandwidths is not None
                      else median_heuristic(x, y.value))
                loss = mmd2(y, x, bw)
                grads = tape.gradients(loss, params)
            opt.step(grads)
            epoch_loss += float(loss.value)
        history["epoch"].append(epoch)
        history["mmd2"].append(epoch_loss / batches_per_epoch)
    for name, p in model.named_parameters().items():
        if not np.array_equal(frozen_before[name], p.value):
            raise RuntimeError(
                f"alignment modified frozen source parameter {name!r}")
    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mmd2"])
            for e, v in zip(history["epoch"], history["mmd2"]):
                writer.writerow([e, f"{v:.8g}"])
    return history
