"""Grounding an abstract simulator against offline target-environment data.

A recurrent encoder summarizes the history of abstract states and actions
into a compact latent code.  Three heads consume that code:

* a latent transition head predicting a diagonal Gaussian over the next
  latent code,
* a reward head predicting the target environment's reward, and
* a successor corrector that takes the abstract simulator's raw
  one-step prediction and outputs a corrected next abstract state.

The corrector is residual with a zero-initialized final layer, so an
untrained model reproduces the raw simulator exactly.  Training runs
truncated backpropagation through time over padded trajectory batches
with per-transition masks; ablation modes drop the transition and/or
reward losses while always keeping the correction loss.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset
from .envs import EnvPair
from .nn import GaussianHead, GruCell, Linear, Mlp, Module, gaussian_nll
from .numerics import Adam, Tape, ops

log = logging.getLogger(__name__)

LATENT_DIM = 32
HIDDEN_DIM = 64

# loss weights (transition, reward, correction) per training mode
MODES = {
    "full": (1.0, 1.0, 1.0),
    "no_trans": (0.0, 1.0, 1.0),
    "no_rew": (1.0, 0.0, 1.0),
    "nas": (0.0, 0.0, 1.0),
}

_STD_FLOOR = 1e-6


class AstraModel(Module):
    """History encoder plus transition / reward / correction heads."""

    def __init__(self, abs_dim, action_dim, seed=0,
                 latent_dim=LATENT_DIM, hidden=HIDDEN_DIM):
        super().__init__()
        self.abs_dim = abs_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        self.encoder_gru = GruCell(abs_dim + action_dim, hidden, rng)
        self.encoder_out = Linear(hidden, latent_dim, rng)
        self.p_lat = GaussianHead(latent_dim + action_dim, latent_dim, hidden, rng)
        # learned reward: a latent-conditioned per-step cost plus a learned
        # potential over abstract states, r = g(z, a) + phi(s) - phi(s').
        # Progress-shaped rewards depend on where the transition actually
        # lands, which (z, a) alone cannot resolve, and the potential form
        # makes closed loops cancel exactly so a policy trained on the
        # learned reward cannot farm off-distribution prediction bias.
        # Two independently initialized heads are trained and the rollout
        # reward is their minimum: a policy can only collect reward where
        # both heads agree, which pins down the remaining extrapolation
        # optimism in the step-cost term
        self.r_base = Mlp([latent_dim + action_dim, hidden, 1], rng)
        self.r_pot = Mlp([abs_dim, hidden, 1], rng)
        self.r_base2 = Mlp([latent_dim + action_dim, hidden, 1], rng)
        self.r_pot2 = Mlp([abs_dim, hidden, 1], rng)
        self.f_abs = Mlp([latent_dim + action_dim + abs_dim, hidden, abs_dim],
                         rng, zero_last=True)
        self.adopt("enc_gru", self.encoder_gru)
        self.adopt("enc_out", self.encoder_out)
        self.adopt("p_lat", self.p_lat)
        self.adopt("r_base", self.r_base)
        self.adopt("r_pot", self.r_pot)
        self.adopt("r_base2", self.r_base2)
        self.adopt("r_pot2", self.r_pot2)
        self.adopt("f_abs", self.f_abs)
        self.abs_mean = np.zeros(abs_dim)
        self.abs_std = np.ones(abs_dim)
        self.rew_mean = 0.0
        self.rew_std = 1.0
        # per-dim std of the corrected prediction's residual against the
        # real successor, estimated on held-out data after training; the
        # grounded simulator samples this noise so policies trained in it
        # cannot rely on exact (mean) dynamics the target won't deliver.
        # Zero for an untrained model, which keeps the untrained grounded
        # simulator exactly equal to the raw simulator
        self.res_std = np.zeros(abs_dim)

    # -- normalization ----------------------------------------------------

    def fit_normalizer(self, dataset: Dataset, pair: EnvPair, indices=None):
        """Set abstract-state normalization from the dataset's train split."""
        if indices is None:
            indices = dataset.train_indices() or range(len(dataset))
        stacked = np.concatenate(
            [pair.phi(dataset.trajectories[i].states) for i in indices])
        self.abs_mean = stacked.mean(axis=0)
        self.abs_std = np.maximum(stacked.std(axis=0), _STD_FLOOR)
        # rewards are trained in standardized units: their raw scale is
        # often tiny next to the state losses, which starves the reward
        # head (and the encoder's reward pathway) of gradient
        # statistics over the transitions actually trained on (the final
        # step of each trajectory is excluded by the pairing), so sparse
        # terminal bonuses don't inflate the scale
        rewards = np.concatenate(
            [dataset.trajectories[i].rewards[:max(len(dataset.trajectories[i]) - 1, 1)]
             for i in indices])
        self.rew_mean = float(rewards.mean())
        self.rew_std = float(max(rewards.std(), _STD_FLOOR))

    def normalize(self, s_abs):
        return (np.asarray(s_abs, dtype=np.float64) - self.abs_mean) / self.abs_std

    # -- eager (rollout) interface ----------------------------------------

    def init_hidden(self, batch: int) -> np.ndarray:
        return self.encoder_gru.zero_state(batch)

    def encode_step(self, h, s_abs, prev_action):
        """One eager encoder step over a batch; returns (h_next, z)."""
        x = np.concatenate([self.normalize(np.atleast_2d(s_abs)),
                            np.atleast_2d(prev_action)], axis=1)
        h_next = self.encoder_gru.step(h, x).value
        z = self.encoder_out(h_next).value
        return h_next, z

    def correct(self, z, action, s_next_raw):
        """Corrected next abstract state for the raw simulator successor."""
        s_next_raw = np.atleast_2d(np.asarray(s_next_raw, dtype=np.float64))
        inp = np.concatenate([np.atleast_2d(z), np.atleast_2d(action),
                              self.normalize(s_next_raw)], axis=1)
        return s_next_raw + self.f_abs(inp).value

    def predict_reward(self, z, action, s_prev, s_next):
        """Reward for a transition between abstract states (pessimistic
        minimum over the twin heads)."""
        za = np.concatenate([np.atleast_2d(z), np.atleast_2d(action)], axis=1)
        u_prev = self.normalize(np.atleast_2d(s_prev))
        u_next = self.normalize(np.atleast_2d(s_next))
        preds = [
            (base(za).value[:, 0]
             + pot(u_prev).value[:, 0] - pot(u_next).value[:, 0])
            for base, pot in ((self.r_base, self.r_pot),
                              (self.r_base2, self.r_pot2))]
        return np.minimum(*preds) * self.rew_std + self.rew_mean

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.named_parameters().items()}
        out["norm.abs_mean"] = self.abs_mean
        out["norm.abs_std"] = self.abs_std
        out["norm.rew"] = np.array([self.rew_mean, self.rew_std])
        out["norm.res_std"] = self.res_std
        return out

    def save(self, path):
        ckpt.save_checkpoint(path, self.state_arrays())

    def load(self, path):
        arrays = ckpt.load_checkpoint(path)
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            unknown = sorted(set(arrays) - expected)
            raise IOError(f"checkpoint name mismatch: missing {missing}, "
                          f"unknown {unknown}")
        for name, p in self.named_parameters().items():
            if arrays[name].size != p.value.size:
                raise IOError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"{arrays[name].shape} vs {p.value.shape}")
            p.value = arrays[name].reshape(p.value.shape)
        self.abs_mean = arrays["norm.abs_mean"]
        self.abs_std = arrays["norm.abs_std"]
        self.rew_mean = float(arrays["norm.rew"][0])
        self.rew_std = float(arrays["norm.rew"][1])
        self.res_std = arrays["norm.res_std"]


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """Padded trajectory batch; transitions are masked per validity."""
    abs_in: np.ndarray       # (B, L, d)   abstract state at each step
    prev_a: np.ndarray       # (B, L, a)   previous action (zero at t=0)
    act: np.ndarray          # (B, L-1, a) action taken at the transition
    rew: np.ndarray          # (B, L-1)
    next_real: np.ndarray    # (B, L-1, d) abstraction of the real successor
    next_sim: np.ndarray     # (B, L-1, d) raw simulator successor
    mask: np.ndarray         # (B, L-1)    1.0 for valid transitions

    @property
    def L(self):
        return self.abs_in.shape[1]


def prepare_batch(dataset: Dataset, pair: EnvPair, indices) -> Batch:
    """Pad the selected paired trajectories into dense arrays."""
    trajs = [dataset.trajectories[i] for i in indices]
    for t in trajs:
        if not t.paired:
            raise ValueError("grounding needs paired trajectories; run pairing")
    L = max(len(t) for t in trajs)
    B, d, a = len(trajs), pair.abstract_dim, pair.action_dim
    batch = Batch(
        abs_in=np.zeros((B, L, d)), prev_a=np.zeros((B, L, a)),
        act=np.zeros((B, L - 1, a)), rew=np.zeros((B, L - 1)),
        next_real=np.zeros((B, L - 1, d)), next_sim=np.zeros((B, L - 1, d)),
        mask=np.zeros((B, L - 1)),
    )
    for k, traj in enumerate(trajs):
        T = len(traj)
        s_abs = pair.phi(traj.states)            # (T+1, d)
        batch.abs_in[k, :T] = s_abs[:T]
        batch.prev_a[k, 1:T] = traj.actions[:T - 1]
        n = T - 1                                # transitions with paired data
        batch.act[k, :n] = traj.actions[:n]
        batch.rew[k, :n] = traj.rewards[:n]
        batch.next_real[k, :n] = s_abs[1:T]
        sim = traj.abs_next_sim
        valid = np.isfinite(sim).all(axis=1)
        batch.next_sim[k, :n][valid] = sim[valid]
        batch.mask[k, :n] = valid.astype(np.float64)
    return batch


# ---------------------------------------------------------------------------
# losses

def _flatten(arr, ts):
    """Stack time slices ``ts`` of (B, L, ...) time-major into (len(ts)*B, ...)."""
    picked = arr[:, ts]
    moved = np.moveaxis(picked, 1, 0)
    return moved.reshape((-1,) + arr.shape[2:])


def chunk_losses(model: AstraModel, batch: Batch, c0, c1, h0, weights,
                 trans_target=None):
    """Losses over transitions t in [c0, min(c1, L-1)).

    Runs the encoder for steps c0..c1 (one step past the carried hidden
    state so the last transition in the window has its target latent) and
    returns per-transition-averaged loss nodes plus the hidden state to
    carry into the next window.

    The transition loss treats the next latent as a fixed target (no
    gradient through it).  ``trans_target`` overrides the target with a
    constant array; the finite-difference oracle uses this to hold the
    target at its unperturbed value.
    """
    w_trans, w_rew, w_abs = weights
    last_t = min(c1, batch.L - 1)
    h = ops.as_node(h0)
    h_out = h0
    zs = {}
    for t in range(c0, last_t + 1):
        x = np.concatenate([
            model.normalize(batch.abs_in[:, t]), batch.prev_a[:, t]], axis=1)
        h = model.encoder_gru.step(h, x)
        zs[t] = model.encoder_out(h)
        if t == c1 - 1:
            h_out = h.value.copy()
    ts = list(range(c0, last_t))
    m = _flatten(batch.mask[..., None], ts)      # (N, 1)
    count = float(m.sum())
    out = {"count": count, "h_out": h_out}
    if count == 0.0:
        return out
    z = ops.concat([zs[t] for t in ts], axis=0)
    act = _flatten(batch.act, ts)
    za = ops.concat([z, act], axis=1)
    if w_trans:
        mu, log_var = model.p_lat(za)
        if trans_target is None:
            z_next = ops.concat([zs[t + 1] for t in ts], axis=0)
            target = ops.stop_gradient(z_next)
            out["trans_target"] = target.value
        else:
            target = ops.as_node(trans_target)
        inv_var = ops.exp(ops.neg(log_var))
        sq = ops.mul(ops.square(ops.sub(target, mu)), inv_var)
        per_elem = ops.add(ops.add(sq, log_var), np.log(2.0 * np.pi))
        # averaged per element (like l_abs) so the 32-dim latent NLL does
        # not dwarf the other losses' gradients into the shared encoder
        out["l_trans"] = ops.mul(ops.sum(ops.mul(per_elem, m)),
                                 0.5 / (count * model.latent_dim))
    if w_rew:
        u_prev = model.normalize(_flatten(batch.abs_in[:, :-1], ts))
        u_next = model.normalize(_flatten(batch.next_real, ts))
        rew_norm = _flatten((batch.rew[..., None] - model.rew_mean)
                            / model.rew_std, ts)
        errs = []
        for base, pot in ((model.r_base, model.r_pot),
                          (model.r_base2, model.r_pot2)):
            r_hat = ops.add(base(za), ops.sub(pot(u_prev), pot(u_next)))
            errs.append(ops.square(ops.sub(r_hat, rew_norm)))
        err = ops.mul(ops.add(errs[0], errs[1]), 0.5)
        out["l_rew"] = ops.mul(ops.sum(ops.mul(err, m)), 1.0 / count)
    if w_abs:
        next_sim = _flatten(batch.next_sim, ts)
        inp = ops.concat([za, ops.as_node(model.normalize(next_sim))], axis=1)
        corrected = ops.add(model.f_abs(inp), next_sim)
        err = ops.square(ops.sub(corrected, _flatten(batch.next_real, ts)))
        out["l_abs"] = ops.mul(ops.sum(ops.mul(err, m)),
                               1.0 / (count * model.abs_dim))
    return out


def batch_losses(model, batch, weights, window=None, train_step=None):
    """Accumulate chunk losses over a whole batch.

    Without ``train_step`` this is a pure evaluation pass; with it, each
    window chunk is taped separately and ``train_step(total_node, tape)``
    performs an update before the next chunk (truncated backprop).
    Returns count-weighted average loss values.
    """
    window = window or batch.L
    totals = {"l_trans": 0.0, "l_rew": 0.0, "l_abs": 0.0}
    count = 0.0
    h = model.init_hidden(batch.mask.shape[0])
    for c0 in range(0, batch.L - 1, window):
        c1 = min(c0 + window, batch.L)
        if train_step is not None:
            with Tape() as tape:
                out = chunk_losses(model, batch, c0, c1, h, weights)
                if out["count"] > 0.0:
                    train_step(_weighted_total(out, weights), tape)
        else:
            out = chunk_losses(model, batch, c0, c1, h, weights)
        h = out["h_out"]
        for key in totals:
            if key in out:
                totals[key] += out[key].value * out["count"]
        count += out["count"]
    return {k: v / max(count, 1.0) for k, v in totals.items()}


def _weighted_total(out, weights):
    w_trans, w_rew, w_abs = weights
    terms = []
    if w_trans and "l_trans" in out:
        terms.append(ops.mul(out["l_trans"], w_trans))
    if w_rew and "l_rew" in out:
        terms.append(ops.mul(out["l_rew"], w_rew))
    if w_abs and "l_abs" in out:
        terms.append(ops.mul(out["l_abs"], w_abs))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


# ---------------------------------------------------------------------------
# training

def train_grounding(model: AstraModel, dataset: Dataset, pair: EnvPair,
                    mode="full", epochs=150, lr=1e-3, window=50,
                    patience=20, batch_size=None, log_path=None,
                    seed=0) -> dict:
    """Train the grounding model; returns the loss history.

    ``mode`` selects the loss weighting (see :data:`MODES`).  Early
    stopping monitors the weighted validation loss; the best parameters
    are restored on exit.
    """
    if mode not in MODES:
        raise ValueError(f"unknown grounding mode {mode!r}; known: {sorted(MODES)}")
    weights = MODES[mode]
    train_idx = dataset.train_indices() or list(range(len(dataset)))
    val_idx = dataset.val_indices() or train_idx
    model.fit_normalizer(dataset, pair, train_idx)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    params = model.parameters()
    opt = Adam(params, lr=lr)

    def train_step(total, tape):
        grads = tape.gradients(total, params)
        opt.step(grads)

    batch_size = batch_size or len(train_idx)
    val_batch = prepare_batch(dataset, pair, val_idx)
    history = {"epoch": [], "train": [], "val": [],
               "val_trans": [], "val_rew": [], "val_abs": []}
    best = np.inf
    best_state = None
    bad = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        train_total = 0.0
        n_groups = 0
        for lo in range(0, len(order), batch_size):
            group = [train_idx[i] for i in order[lo:lo + batch_size]]
            batch = prepare_batch(dataset, pair, group)
            losses = batch_losses(model, batch, weights, window, train_step)
            train_total += _scalar_total(losses, weights)
            n_groups += 1
        val = batch_losses(model, val_batch, weights, window)
        val_total = _scalar_total(val, weights)
        history["epoch"].append(epoch)
        history["train"].append(train_total / max(n_groups, 1))
        history["val"].append(val_total)
        history["val_trans"].append(val["l_trans"])
        history["val_rew"].append(val["l_rew"])
        history["val_abs"].append(val["l_abs"])
        if val_total < best - 1e-9:
            best = val_total
            best_state = [p.value.copy() for p in params]
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                log.info("grounding early stop at epoch %d (best val %.6g)",
                         epoch, best)
                break
    if best_state is not None:
        for p, v in zip(params, best_state):
            p.value = v
    if log_path is not None:
        _write_history(log_path, history)
    return history


def _scalar_total(losses, weights):
    w_trans, w_rew, w_abs = weights
    return (w_trans * losses["l_trans"] + w_rew * losses["l_rew"]
            + w_abs * losses["l_abs"])


def _write_history(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(history)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in zip(*(history[k] for k in keys)):
            writer.writerow([f"{v:.8g}" if isinstance(v, float) else v
                             for v in row])


# ---------------------------------------------------------------------------
# evaluation

def prediction_report(model: AstraModel | None, dataset: Dataset,
                      pair: EnvPair, indices=None) -> dict:
    """One-step prediction errors on paired transitions.

    Returns per-element MSEs of the raw simulator successor and (when a
    model is given) the corrected successor against the real successor,
    plus the reward-prediction MSE.
    """
    if indices is None:
        indices = range(len(dataset))
    sq_raw = sq_corr = sq_rew = 0.0
    n = 0
    for i in indices:
        traj = dataset.trajectories[i]
        if not traj.paired:
            raise ValueError("prediction_report needs paired trajectories")
        T = len(traj)
        s_abs = pair.phi(traj.states)
        valid = np.isfinite(traj.abs_next_sim).all(axis=1)
        sim = traj.abs_next_sim[valid]
        real = s_abs[1:T][valid]
        sq_raw += float(np.sum((sim - real) ** 2))
        if model is not None:
            h = model.init_hidden(1)
            prev_a = np.zeros(pair.action_dim)
            zs = []
            for t in range(T - 1):
                h, z = model.encode_step(h, s_abs[t][None], prev_a[None])
                zs.append(z[0])
                prev_a = traj.actions[t]
            zs = np.array(zs)[valid]
            acts = traj.actions[:T - 1][valid]
            corrected = model.correct(zs, acts, sim)
            sq_corr += float(np.sum((corrected - real) ** 2))
            r_hat = model.predict_reward(zs, acts,
                                         s_abs[:T - 1][valid], real)
            sq_rew += float(np.sum((r_hat - traj.rewards[:T - 1][valid]) ** 2))
        n += int(valid.sum())
    denom = max(n * pair.abstract_dim, 1)
    out = {"count": n, "raw_mse": sq_raw / denom}
    if model is not None:
        out["grounded_mse"] = sq_corr / denom
        out["reward_mse"] = sq_rew / max(n, 1)
    return out
