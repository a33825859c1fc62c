"""Policy learning inside the abstract simulator.

Policies are tanh-squashed diagonal-Gaussian actor-critics.  Methods
that use the grounded simulator act on the frozen encoder's latent code
(feedforward heads); direct-transfer and domain-randomization baselines
have no encoder, so they carry their own GRU over raw abstract
observations and previous actions, keeping every method
history-conditioned.

Rollouts come from one of two vectorized sources: the raw abstract
simulator (optionally with action-noise/scaling domain randomization) or
the grounded simulator, where each step is dynamics -> correction ->
termination judged on the corrected state -> state override, with the
reward head supplying the training reward.  The optimizer is a clipped
surrogate policy gradient (PPO) with generalized advantage estimation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .envs import EnvPair
from .grounding import AstraModel
from .nn import GruCell, Mlp, Module
from .numerics import Adam, Tape, ops

log = logging.getLogger(__name__)

LOG_STD_MIN = -3.0
LOG_STD_MAX = 1.0
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# domain randomization

@dataclass(frozen=True)
class DrConfig:
    noise_std: float = 0.05      # per-step additive action noise
    scale_low: float = -0.1      # per-episode multiplicative scaling delta
    scale_high: float = 0.1

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.scale_low > self.scale_high:
            raise ValueError("scale range inverted")


def apply_dr(action, delta, eps, low=-1.0, high=1.0):
    """Perturbed action (1 + delta) * a + eps, clipped to bounds.

    ``delta`` is drawn once per episode, ``eps`` once per step.
    """
    a = np.asarray(action, dtype=np.float64)
    return np.clip((1.0 + delta) * a + eps, low, high)


# ---------------------------------------------------------------------------
# policy

class Policy(Module):
    """Tanh-squashed Gaussian actor-critic, optionally GRU-conditioned.

    Non-recurrent policies consume a feature vector directly (e.g. the
    grounded latent).  Recurrent policies maintain a GRU over
    (observation, previous action) and feed its hidden state to the
    heads.
    """

    def __init__(self, obs_dim, action_dim, seed=0, hidden=64,
                 recurrent=False):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.recurrent = recurrent
        rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))
        if recurrent:
            self.gru = GruCell(obs_dim + action_dim, hidden, rng)
            self.adopt("gru", self.gru)
            feat_dim = hidden
        else:
            self.gru = None
            feat_dim = obs_dim
        self.actor = Mlp([feat_dim, hidden, action_dim], rng)
        self.critic = Mlp([feat_dim, hidden, 1], rng)
        self.adopt("actor", self.actor)
        self.adopt("critic", self.critic)
        self.log_std = self._add("log_std",
                                 np.full((1, action_dim), -0.5))

    # -- features ----------------------------------------------------------

    def initial_state(self, n):
        return self.gru.zero_state(n) if self.recurrent else np.zeros((n, 0))

    def features(self, state, obs, prev_action):
        """Eager feature step; returns (next recurrent state, features)."""
        obs = np.atleast_2d(obs)
        if not self.recurrent:
            return state, obs
        x = np.concatenate([obs, np.atleast_2d(prev_action)], axis=1)
        h = self.gru.step(state, x).value
        return h, h

    def features_node(self, mb):
        """Taped features for a minibatch (one recomputed GRU step for
        recurrent policies, from the stored pre-step hidden state)."""
        if not self.recurrent:
            return ops.as_node(mb["obs"])
        x = np.concatenate([mb["obs"], mb["prev_a"]], axis=1)
        return self.gru.step(ops.as_node(mb["h_prev"]), x)

    # -- distribution ------------------------------------------------------

    def _clamped_log_std(self):
        return ops.clip(ops.leaf(self.log_std), LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, feats, rng):
        """Eager action sample: returns pre-squash u, squashed action a,
        Gaussian log-prob of u, and the value estimate."""
        feats = np.atleast_2d(feats)
        mu = self.actor(feats).value
        log_std = np.clip(self.log_std.value, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mu + std * rng.standard_normal(mu.shape)
        logp = (-0.5 * (((u - mu) / std) ** 2).sum(axis=1)
                - log_std.sum() - 0.5 * self.action_dim * LOG_2PI)
        value = self.critic(feats).value[:, 0]
        return {"u": u, "a": np.tanh(u), "logp": logp, "value": value}

    def act(self, feats):
        """Deterministic deployment action (tanh of the mean)."""
        return np.tanh(self.actor(np.atleast_2d(feats)).value)

    def value(self, feats):
        return self.critic(np.atleast_2d(feats)).value[:, 0]

    # -- persistence -------------------------------------------------------

    def state_arrays(self):
        return {name: p.value for name, p in self.named_parameters().items()}

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


# ---------------------------------------------------------------------------
# PPO

@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    horizon: int = 128           # steps per env per iteration
    minibatch: int = 256
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.clip <= 0:
            raise ValueError("clip ratio must be positive")


def ppo_losses(policy: Policy, mb, cfg: PpoConfig):
    """Clipped-surrogate, value, and entropy loss nodes for a minibatch.

    The tanh log-prob correction term depends only on the stored
    pre-squash actions, so it cancels in the probability ratio and is
    omitted.
    """
    feat = policy.features_node(mb)
    mu = policy.actor(feat)
    log_std = policy._clamped_log_std()
    inv_var = ops.exp(ops.mul(log_std, -2.0))
    diff = ops.sub(mb["u"], mu)
    logp = ops.sub(
        ops.mul(ops.sum(ops.mul(ops.square(diff), inv_var), axis=1), -0.5),
        ops.add(ops.sum(log_std),
                0.5 * policy.action_dim * LOG_2PI))
    ratio = ops.exp(ops.sub(logp, mb["logp_old"]))
    adv = mb["adv"]
    surr = ops.minimum(ops.mul(ratio, adv),
                       ops.mul(ops.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip),
                               adv))
    actor_loss = ops.neg(ops.mean(surr))
    v = ops.getitem(policy.critic(feat), (slice(None), 0))
    value_loss = ops.mean(ops.square(ops.sub(v, mb["ret"])))
    entropy = ops.add(ops.sum(log_std),
                      0.5 * policy.action_dim * (1.0 + LOG_2PI))
    total = ops.sub(
        ops.add(actor_loss, ops.mul(value_loss, cfg.value_coef)),
        ops.mul(entropy, cfg.entropy_coef))
    return {"total": total, "actor": actor_loss, "value": value_loss,
            "entropy": entropy}


def gae(rewards, values, dones, last_values, gamma, lam):
    """Generalized advantage estimation over (T, N) arrays.

    ``dones[t, n]`` marks the transition at t as terminal (no bootstrap
    across it); ``last_values`` bootstraps the final step.
    """
    T, N = rewards.shape
    adv = np.zeros((T, N))
    running = np.zeros(N)
    for t in range(T - 1, -1, -1):
        next_v = last_values if t == T - 1 else values[t + 1]
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        adv[t] = running
    return adv, adv + values


def train_policy(policy: Policy, source, cfg: PpoConfig, iters, seed,
                 log_path=None) -> dict:
    """PPO training loop; returns per-iteration curves.

    A non-finite loss or gradient aborts the run, restoring the last
    finite parameter snapshot (``history['aborted']`` is set).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 606]))
    params = policy.parameters()
    opt = Adam(params, lr=cfg.lr)
    N = source.n_envs
    obs = source.reset()
    prev_a = np.zeros((N, policy.action_dim))
    state = policy.initial_state(N)
    history = {"iter": [], "mean_return": [], "mean_length": [],
               "success_rate": [], "loss": [], "aborted": False}
    snapshot = [p.value.copy() for p in params]
    for it in range(iters):
        T = cfg.horizon
        store = {
            "obs": np.zeros((T, N, obs.shape[1])),
            "prev_a": np.zeros((T, N, policy.action_dim)),
            "h_prev": np.zeros((T, N, state.shape[1])),
            "u": np.zeros((T, N, policy.action_dim)),
            "logp_old": np.zeros((T, N)),
            "value": np.zeros((T, N)),
            "reward": np.zeros((T, N)),
            "done": np.zeros((T, N)),
        }
        for t in range(T):
            store["obs"][t] = obs
            store["prev_a"][t] = prev_a
            store["h_prev"][t] = state
            state, feats = policy.features(state, obs, prev_a)
            out = policy.sample(feats, rng)
            obs, rewards, dones, infos = source.step(out["a"])
            store["u"][t] = out["u"]
            store["logp_old"][t] = out["logp"]
            store["value"][t] = out["value"]
            store["reward"][t] = rewards
            store["done"][t] = dones
            prev_a = out["a"].copy()
            if dones.any():
                prev_a[dones] = 0.0
                if policy.recurrent:
                    state = state.copy()
                    state[dones] = 0.0
        _, feats = policy.features(state, obs, prev_a)
        last_values = policy.value(feats)
        adv, ret = gae(store["reward"], store["value"], store["done"],
                       last_values, cfg.gamma, cfg.lam)
        adv_flat = adv.reshape(-1)
        adv_std = adv_flat.std()
        if adv_std > 1e-8:
            adv_flat = (adv_flat - adv_flat.mean()) / adv_std
        flat = {k: v.reshape((T * N,) + v.shape[2:]) for k, v in store.items()}
        flat["adv"] = adv_flat
        flat["ret"] = ret.reshape(-1)
        n_samples = T * N
        loss_value = np.nan
        try:
            for _ in range(cfg.epochs):
                order = rng.permutation(n_samples)
                for lo in range(0, n_samples, cfg.minibatch):
                    idx = order[lo:lo + cfg.minibatch]
                    mb = {k: flat[k][idx] for k in
                          ("obs", "prev_a", "h_prev", "u", "logp_old",
                           "adv", "ret")}
                    with Tape() as tape:
                        losses = ppo_losses(policy, mb, cfg)
                        grads = tape.gradients(losses["total"], params)
                    opt.step(grads)
                    loss_value = float(losses["total"].value)
            if not np.isfinite(loss_value):
                raise FloatingPointError("non-finite PPO loss")
        except FloatingPointError as exc:
            log.warning("PPO aborted at iteration %d: %s", it, exc)
            for p, v in zip(params, snapshot):
                p.value = v
            history["aborted"] = True
            break
        snapshot = [p.value.copy() for p in params]
        stats = source.drain_episodes()
        history["iter"].append(it)
        history["mean_return"].append(
            float(np.mean([s["ret"] for s in stats])) if stats else np.nan)
        history["mean_length"].append(
            float(np.mean([s["len"] for s in stats])) if stats else np.nan)
        history["success_rate"].append(
            float(np.mean([s["success"] for s in stats])) if stats else np.nan)
        history["loss"].append(loss_value)
    if log_path is not None:
        _write_curves(log_path, history)
    return history


def _write_curves(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_return", "mean_length",
                         "success_rate", "loss"])
        for row in zip(history["iter"], history["mean_return"],
                       history["mean_length"], history["success_rate"],
                       history["loss"]):
            writer.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])


# ---------------------------------------------------------------------------
# rollout sources

class _EpisodeTracker:
    def __init__(self, n_envs):
        self.n_envs = n_envs
        self._ret = np.zeros(n_envs)
        self._len = np.zeros(n_envs, dtype=np.int64)
        self._completed = []

    def record(self, k, reward, done, success):
        self._ret[k] += reward
        self._len[k] += 1
        if done:
            self._completed.append({"ret": self._ret[k],
                                    "len": int(self._len[k]),
                                    "success": bool(success)})
            self._ret[k] = 0.0
            self._len[k] = 0

    def drain(self):
        out = self._completed
        self._completed = []
        return out


class AbstractRollouts:
    """Vectorized rollouts in the raw abstract simulator.

    With a :class:`DrConfig`, actions are perturbed before execution
    (scaling delta per episode, additive noise per step); the executed
    actions are logged alongside the policy actions for distribution
    checks.
    """

    def __init__(self, pair: EnvPair, n_envs=8, dr: DrConfig | None = None,
                 seed=0):
        self.pair = pair
        self.n_envs = n_envs
        self.dr = dr
        self.seed = seed
        self.envs = [pair.make_abstract() for _ in range(n_envs)]
        self.obs_dim = pair.abstract_dim
        self._episode = np.zeros(n_envs, dtype=np.int64)
        self._dr_rng = [np.random.default_rng(np.random.SeedSequence(
            [seed, k, 707])) for k in range(n_envs)]
        self._deltas = np.zeros(n_envs)
        self._tracker = _EpisodeTracker(n_envs)
        self.action_log = []

    def _env_seed(self, k):
        s = int(np.random.SeedSequence(
            [self.seed, k, int(self._episode[k])]).generate_state(1)[0])
        self._episode[k] += 1
        return s

    def _new_episode(self, k):
        obs = self.envs[k].reset(self._env_seed(k))
        if self.dr is not None:
            self._deltas[k] = self._dr_rng[k].uniform(
                self.dr.scale_low, self.dr.scale_high)
        return obs

    def reset(self):
        self._tracker = _EpisodeTracker(self.n_envs)
        self._episode[:] = 0
        return np.array([self._new_episode(k) for k in range(self.n_envs)])

    def step(self, actions):
        actions = np.atleast_2d(actions)
        obs = np.zeros((self.n_envs, self.obs_dim))
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        infos = []
        for k, env in enumerate(self.envs):
            a = actions[k]
            if self.dr is not None:
                eps = self._dr_rng[k].normal(0.0, self.dr.noise_std,
                                             size=a.shape)
                executed = apply_dr(a, self._deltas[k], eps)
            else:
                executed = a
            if self.dr is not None and len(self.action_log) < 200000:
                self.action_log.append((a.copy(), executed.copy()))
            o, r, done, info = env.step(executed)
            self._tracker.record(k, r, done, info.get("success", False))
            if done:
                o = self._new_episode(k)
            obs[k] = o
            rewards[k] = r
            dones[k] = done
            infos.append(info)
        return obs, rewards, dones, infos

    def drain_episodes(self):
        return self._tracker.drain()


class GroundedRollouts:
    """Vectorized rollouts in the grounded abstract simulator.

    Per step and per environment: raw successor from the simulator
    dynamics, corrected by the grounding model, termination judged on the
    corrected state, then the corrected state overrides the simulator.
    The feature returned to the policy is the encoder latent; training
    reward comes from the reward head (``reward_source='pred'``) or the
    simulator's own reward on corrected states (``'env'``).
    """

    def __init__(self, pair: EnvPair, model: AstraModel, n_envs=8,
                 reward_source="pred", seed=0):
        if reward_source not in ("pred", "env"):
            raise ValueError("reward_source must be 'pred' or 'env'")
        self.pair = pair
        self.model = model
        self.n_envs = n_envs
        self.reward_source = reward_source
        self.seed = seed
        self.envs = [pair.make_abstract() for _ in range(n_envs)]
        self.obs_dim = model.latent_dim
        self._episode = np.zeros(n_envs, dtype=np.int64)
        self._tracker = _EpisodeTracker(n_envs)
        self._h = model.init_hidden(n_envs)
        self._z = np.zeros((n_envs, model.latent_dim))
        self._t = np.zeros(n_envs, dtype=np.int64)

    def _env_seed(self, k):
        s = int(np.random.SeedSequence(
            [self.seed, k, int(self._episode[k])]).generate_state(1)[0])
        self._episode[k] += 1
        return s

    def _begin_episode(self, k):
        obs = self.envs[k].reset(self._env_seed(k))
        self._t[k] = 0
        h_row, z_row = self.model.encode_step(
            self._h[k:k + 1] * 0.0, obs[None],
            np.zeros((1, self.pair.action_dim)))
        self._h[k] = h_row[0]
        self._z[k] = z_row[0]

    def reset(self):
        self._tracker = _EpisodeTracker(self.n_envs)
        self._episode[:] = 0
        self._h = self.model.init_hidden(self.n_envs)
        for k in range(self.n_envs):
            self._begin_episode(k)
        return self._z.copy()

    def step(self, actions):
        actions = np.atleast_2d(actions)
        n = self.n_envs
        prev_states = [env.observe() for env in self.envs]
        raw_next = np.array([env.dynamics(prev_states[k], actions[k])
                             for k, env in enumerate(self.envs)])
        corrected = self.model.correct(self._z, actions, raw_next)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        infos = []
        new_states = np.zeros_like(corrected)
        for k, env in enumerate(self.envs):
            state = corrected[k]
            r_env, done, info = env.judge(prev_states[k], state, self._t[k])
            end = info.get("end_point")
            if end is not None:
                state = state.copy()
                state[:2] = end
            state = env.clamp_state(state)
            env.set_state(state)
            self._t[k] += 1
            if self._t[k] >= env.episode_cap and not done:
                done = True
                info = dict(info, truncated=True)
            info = dict(info, env_reward=r_env)
            rewards[k] = r_env
            dones[k] = done
            infos.append(info)
            new_states[k] = state
        if self.reward_source == "pred":
            # learned dense reward over the realized transition; the
            # judge's declared terminal event bonus is added on top (the
            # head is trained on dense transitions only, and the grounded
            # simulator already relies on the judge for termination)
            rewards = self.model.predict_reward(
                self._z, actions, np.array(prev_states), new_states)
            rewards = rewards + np.array(
                [info.get("event_bonus", 0.0) for info in infos])
        for k in range(n):
            self._tracker.record(k, float(rewards[k]), dones[k],
                                 infos[k].get("success", False))
        # advance the encoder on the corrected states
        h_next, z_next = self.model.encode_step(self._h, new_states, actions)
        self._h = h_next
        self._z = z_next
        for k in range(n):
            if dones[k]:
                self._begin_episode(k)
        return self._z.copy(), rewards, dones, infos

    def drain_episodes(self):
        return self._tracker.drain()


def rollout_grounded(pair: EnvPair, model: AstraModel, act_fn, seed,
                     reward_source="pred", horizon=None):
    """One grounded episode; returns the recorded arrays.

    ``act_fn(z, state) -> action`` is called on the encoder latent and
    the current corrected simulator state (latent policies use ``z``,
    state policies use ``state``).  States are the corrected simulator
    states (the first row is the start state).
    """
    env = pair.make_abstract()
    obs = env.reset(seed)
    horizon = horizon or env.episode_cap
    model_h = model.init_hidden(1)
    model_h, z = model.encode_step(model_h, obs[None],
                                   np.zeros((1, pair.action_dim)))
    states, latents, acts, rews, env_rews = [obs], [z[0]], [], [], []
    info = {}
    t = 0
    done = False
    while not done and t < horizon:
        prev = env.observe()
        a = np.asarray(act_fn(z[0], prev), dtype=np.float64)
        raw = env.dynamics(prev, a)
        corrected = model.correct(z, a[None], raw[None])[0]
        r_env, done, info = env.judge(prev, corrected, t)
        end = info.get("end_point")
        if end is not None:
            corrected = corrected.copy()
            corrected[:2] = end
        corrected = env.clamp_state(corrected)
        env.set_state(corrected)
        t += 1
        if t >= horizon and not done:
            done = True
            info = dict(info, truncated=True)
        if reward_source == "pred":
            r = float(model.predict_reward(z, a[None], prev[None],
                                           corrected[None])[0])
            r += info.get("event_bonus", 0.0)
        else:
            r = r_env
        model_h, z = model.encode_step(model_h, corrected[None], a[None])
        states.append(corrected)
        latents.append(z[0])
        acts.append(a)
        rews.append(r)
        env_rews.append(r_env)
    return {"states": np.array(states), "latents": np.array(latents),
            "actions": np.array(acts), "rewards": np.array(rews),
            "env_rewards": np.array(env_rews), "info": info, "length": t}
