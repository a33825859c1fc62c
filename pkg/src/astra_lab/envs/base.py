"""Environment contract shared by target environments and abstract
simulators.

Abstract simulators additionally expose ``set_state`` (exact state
injection, required by the paired-data protocol and by grounded rollouts)
and split their transition into a pure ``dynamics`` function and a pure
``judge`` function so a correction model can be interposed between them.
"""

from __future__ import annotations

import numpy as np


class EpisodeDone(RuntimeError):
    """Raised when step() is called after the episode has terminated."""


class Env:
    obs_dim: int
    action_dim: int
    action_low: float = -1.0
    action_high: float = 1.0
    episode_cap: int = 500

    def __init__(self):
        self._state = None
        self._done = True
        self._t = 0
        self._rng = np.random.default_rng(0)

    # -- contract ---------------------------------------------------------
    def reset(self, seed) -> np.ndarray:
        self._rng = np.random.default_rng(np.random.SeedSequence(seed))
        self._state = self._sample_start(self._rng)
        self._done = False
        self._t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.array(self._state, dtype=np.float64, copy=True)

    def step(self, action):
        if self._done:
            raise EpisodeDone(f"step() after episode end in {type(self).__name__}")
        action = np.asarray(action, dtype=np.float64)
        prev = self._state
        new_state = self.dynamics(prev, action)
        reward, done, info = self.judge(prev, new_state, self._t)
        self._state = new_state
        self._t += 1
        if self._t >= self.episode_cap and not done:
            done = True
            info = dict(info, truncated=True)
        self._done = done
        return self.observe(), reward, done, info

    @property
    def done(self) -> bool:
        return self._done

    @property
    def steps_taken(self) -> int:
        return self._t

    # -- to implement -----------------------------------------------------
    def _sample_start(self, rng) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state, action) -> np.ndarray:
        """Pure successor computation; must not touch env bookkeeping."""
        raise NotImplementedError

    def judge(self, prev_state, new_state, t) -> tuple[float, bool, dict]:
        """Pure reward/termination computation for one transition."""
        raise NotImplementedError


class AbstractEnv(Env):
    """An abstract simulator: adds exact state injection."""

    def set_state(self, state):
        state = np.array(state, dtype=np.float64, copy=True)
        if state.shape != (self.obs_dim,):
            raise ValueError(
                f"set_state expects shape ({self.obs_dim},), got {state.shape}"
            )
        self._state = state
        self._done = False

    def clamp_state(self, state) -> np.ndarray:
        """Project a proposed state onto the simulator's valid set."""
        return np.asarray(state, dtype=np.float64)


def clip_action(action, low=-1.0, high=1.0) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), low, high)


def bounded_velocity_command(action, v_max) -> np.ndarray:
    """Map a 2-D action in [-1, 1]^2 to a velocity of magnitude <= v_max."""
    a = clip_action(action)
    norm = float(np.hypot(a[0], a[1]))
    if norm > 1.0:
        a = a / norm
    return a * v_max
