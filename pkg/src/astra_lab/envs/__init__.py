"""Environment pairs: a target environment, an abstract simulator with
state injection, and the abstraction map binding them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .base import AbstractEnv, Env, EpisodeDone, clip_action, bounded_velocity_command
from .lagcart import (
    LagCartAbstractEnv, LagCartConstants, LagCartTargetEnv, phi_lagcart,
)
from .maze import MazeSpec, load_maze, parse_maze_config
from .navigation import (
    NavConstants, PointMassEnv, UnicycleEnv, phi_nav, unicycle_abstraction,
    wrap_angle,
)

__all__ = [
    "AbstractEnv", "Env", "EnvPair", "EpisodeDone", "LagCartAbstractEnv",
    "LagCartConstants", "LagCartTargetEnv", "MazeSpec", "NavConstants",
    "PointMassEnv", "UnicycleEnv", "bounded_velocity_command", "clip_action",
    "load_maze", "make_pair", "parse_maze_config", "phi_lagcart", "phi_nav",
    "unicycle_abstraction", "wrap_angle", "PAIR_IDS",
]


@dataclass(frozen=True)
class EnvPair:
    pair_id: str
    make_target: Callable[[], Env]
    make_abstract: Callable[[], AbstractEnv]
    phi: Callable[[np.ndarray], np.ndarray]
    target_dim: int
    abstract_dim: int
    action_dim: int
    planar: bool                 # supports rigid-motion trajectory augmentation
    maze: MazeSpec | None = None


def _nav_pair(pair_id: str, maze_name: str, consts: NavConstants) -> EnvPair:
    maze = load_maze(maze_name)
    return EnvPair(
        pair_id=pair_id,
        make_target=lambda: UnicycleEnv(maze, consts),
        make_abstract=lambda: PointMassEnv(maze, consts),
        phi=phi_nav,
        target_dim=6,
        abstract_dim=4,
        action_dim=2,
        planar=True,
        maze=maze,
    )


def make_pair(pair_id: str) -> EnvPair:
    if pair_id == "lagcart":
        consts = LagCartConstants()
        return EnvPair(
            pair_id=pair_id,
            make_target=lambda: LagCartTargetEnv(consts),
            make_abstract=lambda: LagCartAbstractEnv(consts),
            phi=phi_lagcart,
            target_dim=3,
            abstract_dim=2,
            action_dim=1,
            planar=False,
        )
    if pair_id == "unicycle_umaze":
        return _nav_pair(pair_id, "umaze", NavConstants())
    if pair_id == "unicycle_longmaze":
        return _nav_pair(pair_id, "longmaze", NavConstants())
    raise KeyError(f"unknown env pair {pair_id!r}; known: {PAIR_IDS}")


PAIR_IDS = ("lagcart", "unicycle_umaze", "unicycle_longmaze")
