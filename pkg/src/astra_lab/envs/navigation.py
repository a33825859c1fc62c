"""Maze navigation pair: unicycle target and point-mass abstract simulator.

The abstract simulator tracks velocity commands perfectly.  The target
unicycle has heading inertia (turn-rate limit, heading-error feedback),
first-order speed lag, and position slip noise that grows with turn rate,
so the two disagree exactly where the agent turns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import AbstractEnv, Env, bounded_velocity_command
from .maze import MazeSpec, geodesic_distance, resolve_motion


@dataclass(frozen=True)
class NavConstants:
    dt: float = 0.05
    v_max: float = 1.0
    omega_max: float = 2.0
    k_omega: float = 4.0
    alpha_v: float = 0.3
    slip_coef: float = 0.02     # slip std = slip_coef * |omega|
    c_dist: float = 1.0         # geodesic-progress shaping weight
    episode_cap: int = 500


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = -((-theta + np.pi) % (2.0 * np.pi) - np.pi)
    return w


def unicycle_abstraction(x, y, theta, v, omega):
    """Map a unicycle state to the point-mass state (x, y, vx, vy)."""
    return np.array([x, y, v * np.cos(theta), v * np.sin(theta)])


class _MazeJudge:
    """Shared reward/termination logic for both sides of the nav pair."""

    maze: MazeSpec
    consts: NavConstants

    def judge(self, prev_state, new_state, t):
        end, event = resolve_motion(prev_state[:2], new_state[:2], self.maze)
        # potential-based shaping on the geodesic (through-free-space)
        # distance: rewarding progress rather than penalizing absolute
        # distance keeps "crash early" from dominating "reach the goal",
        # and straight-line distance would reward driving into walls
        progress = (geodesic_distance(self.maze, prev_state[:2])
                    - geodesic_distance(self.maze, end))
        reward = -0.01 + self.consts.c_dist * progress
        info = {"success": False, "collision": False, "end_point": end,
                "event_bonus": 0.0}
        done = False
        if event == "collision":
            reward -= 1.0
            info["event_bonus"] = -1.0
            done = True
            info["collision"] = True
        elif event == "goal":
            reward += 1.0
            info["event_bonus"] = 1.0
            done = True
            info["success"] = True
        return reward, done, info

    def _sample_start_position(self, rng):
        from .maze import crossing_param

        for _ in range(100):
            pos = self.maze.start + rng.normal(0.0, self.maze.start_std, size=2)
            if (self.maze.contains(pos)
                    and crossing_param(self.maze.start, pos, self.maze.walls) == np.inf):
                return pos
        return self.maze.start.copy()

    def step(self, action):
        obs, reward, done, info = super().step(action)
        end = info.get("end_point")
        if end is not None:
            self._state[:2] = end
            obs = self.observe()
        return obs, reward, done, info


class PointMassEnv(_MazeJudge, AbstractEnv):
    """2-D point mass with perfect velocity tracking."""

    obs_dim = 4
    action_dim = 2

    def __init__(self, maze: MazeSpec, consts: NavConstants = NavConstants()):
        super().__init__()
        self.maze = maze
        self.consts = consts
        self.episode_cap = consts.episode_cap

    def _sample_start(self, rng):
        pos = self._sample_start_position(rng)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def dynamics(self, state, action):
        vel = bounded_velocity_command(action, self.consts.v_max)
        pos = state[:2] + self.consts.dt * vel
        return np.array([pos[0], pos[1], vel[0], vel[1]])

    def clamp_state(self, state):
        state = np.array(state, dtype=np.float64, copy=True)
        xmin, ymin, xmax, ymax = self.maze.bounds
        state[0] = np.clip(state[0], xmin, xmax)
        state[1] = np.clip(state[1], ymin, ymax)
        speed = float(np.hypot(state[2], state[3]))
        if speed > self.consts.v_max:
            state[2:4] *= self.consts.v_max / speed
        return state


class UnicycleEnv(_MazeJudge, Env):
    """Target unicycle.  Observation: (x, y, vx, vy, theta, omega) where
    (vx, vy) = v (cos theta, sin theta); the abstraction keeps the first
    four entries."""

    obs_dim = 6
    action_dim = 2

    def __init__(self, maze: MazeSpec, consts: NavConstants = NavConstants()):
        super().__init__()
        self.maze = maze
        self.consts = consts
        self.episode_cap = consts.episode_cap

    def _sample_start(self, rng):
        pos = self._sample_start_position(rng)
        theta = self.maze.start_theta
        return np.array([pos[0], pos[1], 0.0, 0.0, theta, 0.0])

    def dynamics(self, state, action):
        c = self.consts
        x, y, _, _, theta, _ = state
        v = float(np.hypot(state[2], state[3]))
        vel_cmd = bounded_velocity_command(action, c.v_max)
        v_des = float(np.hypot(vel_cmd[0], vel_cmd[1]))
        if v_des < 1e-9:
            theta_star = theta
        else:
            theta_star = float(np.arctan2(vel_cmd[1], vel_cmd[0]))
        err = wrap_angle(theta_star - theta)
        omega = float(np.clip(c.k_omega * err, -c.omega_max, c.omega_max))
        theta_new = wrap_angle(theta + c.dt * omega)
        v_new = v + c.alpha_v * (v_des - v)
        slip_std = c.slip_coef * abs(omega)
        slip = self._rng.normal(0.0, 1.0, size=2) * slip_std
        x_new = x + c.dt * v_new * np.cos(theta_new) + slip[0]
        y_new = y + c.dt * v_new * np.sin(theta_new) + slip[1]
        return np.array([
            x_new, y_new,
            v_new * np.cos(theta_new), v_new * np.sin(theta_new),
            theta_new, omega,
        ])


def phi_nav(target_obs) -> np.ndarray:
    """Abstraction map for the navigation pair: drop heading and turn rate."""
    target_obs = np.asarray(target_obs, dtype=np.float64)
    return target_obs[..., :4].copy()
