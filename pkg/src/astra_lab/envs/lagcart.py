"""1-D diagnostic pair: instantaneous cart vs. cart with actuator lag.

The abstract cart tracks velocity commands perfectly; the target cart
filters the command through a first-order actuator and velocity damping,
so constant commands under-shoot at first and overshoot in steady state.
Small and noise-free, which makes it the unit-test workhorse for the
grounding machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import AbstractEnv, Env, clip_action


@dataclass(frozen=True)
class LagCartConstants:
    dt: float = 0.05
    v_max: float = 1.0
    alpha_u: float = 0.3        # actuator first-order lag
    beta: float = 0.5           # velocity damping
    x_goal: float = 1.0
    success_tol: float = 0.1
    start_std: float = 0.02
    episode_cap: int = 100


class _CartJudge:
    consts: LagCartConstants

    def judge(self, prev_state, new_state, t):
        c = self.consts
        err = abs(float(new_state[0]) - c.x_goal)
        reward = -(float(new_state[0]) - c.x_goal) ** 2
        success = err < c.success_tol
        return reward, success, {"success": success, "collision": False}


class LagCartAbstractEnv(_CartJudge, AbstractEnv):
    """State (x, v); perfect velocity tracking."""

    obs_dim = 2
    action_dim = 1

    def __init__(self, consts: LagCartConstants = LagCartConstants()):
        super().__init__()
        self.consts = consts
        self.episode_cap = consts.episode_cap

    def _sample_start(self, rng):
        return np.array([rng.normal(0.0, self.consts.start_std), 0.0])

    def dynamics(self, state, action):
        c = self.consts
        v = float(clip_action(action)[0]) * c.v_max
        return np.array([state[0] + c.dt * v, v])

    def clamp_state(self, state):
        state = np.array(state, dtype=np.float64, copy=True)
        state[1] = np.clip(state[1], -self.consts.v_max, self.consts.v_max)
        return state


class LagCartTargetEnv(_CartJudge, Env):
    """State (x, v, u) with actuator state u."""

    obs_dim = 3
    action_dim = 1

    def __init__(self, consts: LagCartConstants = LagCartConstants()):
        super().__init__()
        self.consts = consts
        self.episode_cap = consts.episode_cap

    def _sample_start(self, rng):
        return np.array([rng.normal(0.0, self.consts.start_std), 0.0, 0.0])

    def dynamics(self, state, action):
        c = self.consts
        x, v, u = state
        cmd = float(clip_action(action)[0]) * c.v_max
        u_new = u + c.alpha_u * (cmd - u)
        v_new = v + c.dt * (u_new - c.beta * v)
        x_new = x + c.dt * v_new
        return np.array([x_new, v_new, u_new])


def phi_lagcart(target_obs) -> np.ndarray:
    """Abstraction map: drop the actuator state."""
    target_obs = np.asarray(target_obs, dtype=np.float64)
    return target_obs[..., :2].copy()
