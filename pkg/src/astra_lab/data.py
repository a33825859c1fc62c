"""Offline target-environment datasets.

Collection runs a temporally smoothed random behavior policy in the
target environment.  Pairing follows the inject-and-replay protocol: for
every non-terminal transition the abstract simulator is reset to the
abstraction of the observed state, the same action is executed, and the
simulator's successor is recorded alongside the real one.

All recorded floats are canonicalized to f32 precision at collection
time so that the on-disk format (f32) round-trips bit-exactly and the
pairing protocol replays bit-exactly from a loaded file.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvPair
from .envs.maze import crossing_param

log = logging.getLogger(__name__)

MAGIC = b"ASTRADATA"
VERSION = 1

TERMINAL_NONE = 0
TERMINAL_SUCCESS = 1
TERMINAL_COLLISION = 2
TERMINAL_TRUNCATED = 3

VAL_FRACTION = 0.1


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class Trajectory:
    seed: int
    states: np.ndarray        # (T+1, target_dim)
    actions: np.ndarray       # (T, action_dim)
    rewards: np.ndarray       # (T,)
    dones: np.ndarray         # (T,) uint8
    terminal: int             # TERMINAL_* code for the final transition
    policy_id: str = "smoothed_random"
    augmented: bool = False
    abs_next_sim: np.ndarray | None = None   # (T-1, abstract_dim) paired data

    def __len__(self):
        return len(self.actions)

    @property
    def paired(self) -> bool:
        return self.abs_next_sim is not None


@dataclass
class Dataset:
    env_pair_id: str
    seed: int
    trajectories: list[Trajectory]
    split: list[int] = field(default_factory=list)   # 0 train / 1 val per traj
    version: int = VERSION

    def __len__(self):
        return len(self.trajectories)

    def train_indices(self):
        return [i for i, s in enumerate(self.split) if s == 0]

    def val_indices(self):
        return [i for i, s in enumerate(self.split) if s == 1]

    def assign_split(self, seed=None):
        """Deterministic whole-trajectory split with a fixed 0.1 val fraction."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        n = len(self.trajectories)
        order = rng.permutation(n)
        n_val = max(1, int(round(VAL_FRACTION * n))) if n >= 2 else 0
        val = set(order[:n_val].tolist())
        self.split = [1 if i in val else 0 for i in range(n)]


# ---------------------------------------------------------------------------
# collection

def smoothed_random_policy(rng, action_dim, low=-1.0, high=1.0, smoothing=0.8):
    """Stateful behavior policy: a_i = s * a_{i-1} + (1 - s) * u."""
    prev = np.zeros(action_dim)

    def act(_obs):
        nonlocal prev
        u = rng.uniform(low, high, size=action_dim)
        prev = smoothing * prev + (1.0 - smoothing) * u
        return prev.copy()

    return act


def grid_explorer_policy(maze, n=10, noise=0.25, smoothing=0.8):
    """Noisy coverage explorer for maze pairs.

    Repeatedly picks a random reachable grid cell and steers toward it
    through a BFS cell path, with heavy action noise and per-episode speed
    variation.  A plain smoothed random walk dies on the first wall before
    it ever sees the far corridors, so maze datasets use this policy; the
    smoothed random walk remains the default elsewhere.
    """
    cells = sorted(free_cells(maze, n))
    xmin, ymin, xmax, ymax = maze.bounds
    dx, dy = (xmax - xmin) / n, (ymax - ymin) / n

    def center(c):
        return np.array([xmin + (c[0] + 0.5) * dx, ymin + (c[1] + 0.5) * dy])

    def cell_of(p):
        return (int(np.clip((p[0] - xmin) / dx, 0, n - 1)),
                int(np.clip((p[1] - ymin) / dy, 0, n - 1)))

    def bfs_path(src, dst):
        if src == dst:
            return [dst]
        prev = {src: None}
        frontier = [src]
        while frontier:
            nxt_frontier = []
            for cur in frontier:
                for step in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    cand = (cur[0] + step[0], cur[1] + step[1])
                    if cand in prev or cand not in cell_set:
                        continue
                    if crossing_param(center(cur), center(cand), maze.walls) != np.inf:
                        continue
                    prev[cand] = cur
                    if cand == dst:
                        path = [cand]
                        while prev[path[-1]] is not None:
                            path.append(prev[path[-1]])
                        return path[::-1]
                    nxt_frontier.append(cand)
            frontier = nxt_frontier
        return [src]

    cell_set = set(cells)

    def factory(rng, action_dim):
        speed = rng.uniform(0.3, 0.75)
        state = {"path": [], "prev": np.zeros(action_dim)}

        def act(obs):
            pos = np.asarray(obs[:2])
            while state["path"] and np.linalg.norm(center(state["path"][0]) - pos) < 0.25:
                state["path"].pop(0)
            if not state["path"]:
                target = cells[int(rng.integers(len(cells)))]
                state["path"] = bfs_path(cell_of(pos), target)
            direction = center(state["path"][0]) - pos
            norm = np.linalg.norm(direction)
            if norm > 1e-9:
                direction = direction / norm
            # slow down while the heading disagrees with the commanded
            # direction; full-speed turns are how the unicycle dies
            heading = np.array([np.cos(obs[4]), np.sin(obs[4])])
            align = float(np.clip(direction @ heading, 0.15, 1.0))
            raw = direction * speed * align + rng.normal(0.0, noise, size=2)
            state["prev"] = smoothing * state["prev"] + (1.0 - smoothing) * raw
            return np.clip(state["prev"], -1.0, 1.0)

        return act

    return factory


def default_policy_for(pair: EnvPair):
    """Behavior policy used for dataset collection on a given pair."""
    if pair.maze is not None:
        return grid_explorer_policy(pair.maze), "grid_explorer"
    return smoothed_random_policy, "smoothed_random"


def _episode_seed(seed, episode):
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def collect(pair: EnvPair, n_traj: int, seed: int, policy=None,
            policy_id="smoothed_random") -> Dataset:
    """Collect ``n_traj`` target-environment trajectories.

    ``policy`` is a factory ``rng -> act(obs)``; the default is the
    temporally smoothed uniform-random behavior policy.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    env = pair.make_target()
    trajectories = []
    for ep in range(n_traj):
        ep_seed = _episode_seed(seed, ep)
        policy_rng = np.random.default_rng(np.random.SeedSequence([seed, ep, 1]))
        act = (policy or smoothed_random_policy)(policy_rng, pair.action_dim)
        obs = env.reset(ep_seed)
        states, actions, rewards, dones = [obs], [], [], []
        terminal = TERMINAL_NONE
        done = False
        while not done:
            a = act(obs)
            obs, r, done, info = env.step(a)
            states.append(obs)
            actions.append(a)
            rewards.append(r)
            dones.append(done)
            if done:
                if info.get("success"):
                    terminal = TERMINAL_SUCCESS
                elif info.get("collision"):
                    terminal = TERMINAL_COLLISION
                else:
                    terminal = TERMINAL_TRUNCATED
        trajectories.append(Trajectory(
            seed=ep_seed,
            states=_f32(np.array(states)),
            actions=_f32(np.array(actions)),
            rewards=_f32(np.array(rewards)),
            dones=np.array(dones, dtype=np.uint8),
            terminal=terminal,
            policy_id=policy_id,
        ))
    ds = Dataset(env_pair_id=pair.pair_id, seed=seed, trajectories=trajectories)
    ds.assign_split()
    return ds


# ---------------------------------------------------------------------------
# pairing

def make_paired(dataset: Dataset, pair: EnvPair) -> int:
    """Attach abstract-simulator successors to every non-terminal transition.

    Returns the number of transitions skipped because the abstraction of a
    recorded state violated the simulator's state invariants.
    """
    env = pair.make_abstract()
    env.reset(0)
    skipped = 0
    for traj in dataset.trajectories:
        T = len(traj)
        preds = np.zeros((max(T - 1, 0), pair.abstract_dim))
        for i in range(T - 1):
            s_abs = pair.phi(traj.states[i])
            clamped = env.clamp_state(s_abs)
            if not np.array_equal(clamped, s_abs):
                skipped += 1
                preds[i] = np.nan
                continue
            env.set_state(s_abs)
            env.step(traj.actions[i])
            preds[i] = env.observe()
        traj.abs_next_sim = _f32(preds)
    if skipped:
        log.warning("pairing skipped %d transitions with invalid abstractions",
                    skipped)
    return skipped


def replay_paired(traj: Trajectory, pair: EnvPair) -> np.ndarray:
    """Re-run the pairing protocol; used to check replay determinism."""
    env = pair.make_abstract()
    env.reset(0)
    T = len(traj)
    preds = np.zeros((max(T - 1, 0), pair.abstract_dim))
    for i in range(T - 1):
        env.set_state(pair.phi(traj.states[i]))
        env.step(traj.actions[i])
        preds[i] = env.observe()
    return _f32(preds)


# ---------------------------------------------------------------------------
# augmentation

def _rigid_transform(states, actions, rot_k, translation, center):
    """Apply a rotation (multiple of 90 degrees about ``center``) plus a
    translation to a planar unicycle trajectory and its actions."""
    angle = rot_k * np.pi / 2.0
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    out_s = states.copy()
    out_s[:, 0:2] = (states[:, 0:2] - center) @ R.T + center + translation
    out_s[:, 2:4] = states[:, 2:4] @ R.T
    from .envs import wrap_angle
    out_s[:, 4] = wrap_angle(states[:, 4] + angle)
    out_a = actions @ R.T
    return out_s, out_a


def _events_match(states, traj: Trajectory, maze) -> bool:
    """True when the transformed trajectory reproduces the original wall
    and goal event pattern against the fixed maze."""
    from .envs.maze import resolve_motion

    T = len(traj)
    for i in range(T):
        p0, p1 = states[i, :2], states[i + 1, :2]
        if not (maze.contains(p0) and maze.contains(p1)):
            return False
        _, event = resolve_motion(p0, p1, maze)
        orig_event = None
        if traj.dones[i]:
            if traj.terminal == TERMINAL_COLLISION:
                orig_event = "collision"
            elif traj.terminal == TERMINAL_SUCCESS:
                orig_event = "goal"
        if event != orig_event:
            return False
    return True


def augment(dataset: Dataset, pair: EnvPair, n_out: int, seed: int) -> Dataset:
    """Grow a planar dataset to ``n_out`` trajectories with rigid motions.

    Rewards and terminal flags are recomputed against the fixed maze;
    transforms that change the trajectory's wall/goal event pattern are
    rejected so paired replays stay dynamically consistent.
    """
    if not pair.planar:
        raise ValueError(f"env pair {pair.pair_id!r} does not support augmentation")
    if n_out < len(dataset.trajectories):
        raise ValueError("n_out must be >= input size")
    maze = pair.maze
    judge_env = pair.make_target()
    rng = np.random.default_rng(seed)
    center = np.array([(maze.bounds[0] + maze.bounds[2]) / 2,
                       (maze.bounds[1] + maze.bounds[3]) / 2])
    out = list(dataset.trajectories)
    n_fallback = 0
    base = dataset.trajectories
    idx = 0
    while len(out) < n_out:
        traj = base[idx % len(base)]
        idx += 1
        new = None
        for _ in range(20):
            rot_k = int(rng.integers(0, 4))
            translation = rng.uniform(-0.5, 0.5, size=2)
            states, actions = _rigid_transform(
                traj.states, traj.actions, rot_k, translation, center)
            if not _events_match(states, traj, maze):
                continue
            rewards = np.zeros(len(traj))
            for i in range(len(traj)):
                r, _, _ = judge_env.judge(states[i], states[i + 1], i)
                rewards[i] = r
            new = Trajectory(
                seed=traj.seed,
                states=_f32(states),
                actions=_f32(actions),
                rewards=_f32(rewards),
                dones=traj.dones.copy(),
                terminal=traj.terminal,
                policy_id=traj.policy_id,
                augmented=True,
            )
            break
        if new is None:
            n_fallback += 1
            new = Trajectory(
                seed=traj.seed, states=traj.states.copy(),
                actions=traj.actions.copy(), rewards=traj.rewards.copy(),
                dones=traj.dones.copy(), terminal=traj.terminal,
                policy_id=traj.policy_id, augmented=False,
            )
        out.append(new)
    if n_fallback:
        log.warning("augment: %d trajectories kept unchanged (no valid "
                    "transform found)", n_fallback)
    result = Dataset(env_pair_id=dataset.env_pair_id, seed=seed,
                     trajectories=out)
    result.assign_split()
    return result


# ---------------------------------------------------------------------------
# subsampling

def subsample(dataset: Dataset, fraction: float, seed: int,
              baseline: int | None = None) -> Dataset:
    """Whole-trajectory subsampling without replacement.

    Selects ``round(fraction * baseline)`` trajectories (baseline defaults
    to the dataset size, so fractions above 1.0 need a larger source
    pool).  Uses a prefix of one seeded permutation, so smaller fractions
    are nested inside larger ones under the same seed.
    """
    if fraction <= 0:
        raise ValueError("fraction must be positive")
    baseline = baseline if baseline is not None else len(dataset.trajectories)
    n = int(round(fraction * baseline))
    if n > len(dataset.trajectories):
        raise ValueError(
            f"fraction {fraction} of baseline {baseline} needs {n} "
            f"trajectories but the pool has {len(dataset.trajectories)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.trajectories))
    chosen = sorted(order[:n].tolist())
    result = Dataset(
        env_pair_id=dataset.env_pair_id, seed=seed,
        trajectories=[dataset.trajectories[i] for i in chosen])
    result.assign_split()
    return result


# ---------------------------------------------------------------------------
# coverage

def free_cells(maze, n=10) -> set[tuple[int, int]]:
    """Grid cells reachable from the start cell (segments between adjacent
    cell centers must not cross walls)."""
    xmin, ymin, xmax, ymax = maze.bounds
    dx, dy = (xmax - xmin) / n, (ymax - ymin) / n

    def center(c):
        return np.array([xmin + (c[0] + 0.5) * dx, ymin + (c[1] + 0.5) * dy])

    def cell_of(p):
        return (min(int((p[0] - xmin) / dx), n - 1),
                min(int((p[1] - ymin) / dy), n - 1))

    start = cell_of(maze.start)
    seen = {start}
    frontier = [start]
    while frontier:
        cur = frontier.pop()
        for dxi, dyi in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (cur[0] + dxi, cur[1] + dyi)
            if not (0 <= nxt[0] < n and 0 <= nxt[1] < n) or nxt in seen:
                continue
            if crossing_param(center(cur), center(nxt), maze.walls) == np.inf:
                seen.add(nxt)
                frontier.append(nxt)
    return seen


def coverage_histogram(dataset: Dataset, maze, n=10) -> np.ndarray:
    """Visit counts of recorded positions on an n x n grid."""
    xmin, ymin, xmax, ymax = maze.bounds
    hist = np.zeros((n, n), dtype=np.int64)
    for traj in dataset.trajectories:
        xs = np.clip(((traj.states[:, 0] - xmin) / (xmax - xmin) * n).astype(int), 0, n - 1)
        ys = np.clip(((traj.states[:, 1] - ymin) / (ymax - ymin) * n).astype(int), 0, n - 1)
        np.add.at(hist, (xs, ys), 1)
    return hist


# ---------------------------------------------------------------------------
# persistence

def save_dataset(dataset: Dataset, path):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", dataset.version))
        pid = dataset.env_pair_id.encode()
        fh.write(struct.pack("<H", len(pid)))
        fh.write(pid)
        fh.write(struct.pack("<qI", dataset.seed, len(dataset.trajectories)))
        for k, traj in enumerate(dataset.trajectories):
            split = dataset.split[k] if k < len(dataset.split) else 255
            pol = traj.policy_id.encode()
            T = len(traj)
            tdim = traj.states.shape[1]
            adim = traj.actions.shape[1]
            pdim = traj.abs_next_sim.shape[1] if traj.paired else 0
            fh.write(struct.pack("<qH", traj.seed, len(pol)))
            fh.write(pol)
            fh.write(struct.pack("<BBIBHHH", int(traj.augmented), split, T,
                                 traj.terminal, tdim, adim, pdim))
            fh.write(np.asarray(traj.states, dtype="<f4").tobytes())
            fh.write(np.asarray(traj.actions, dtype="<f4").tobytes())
            fh.write(np.asarray(traj.rewards, dtype="<f4").tobytes())
            fh.write(traj.dones.astype(np.uint8).tobytes())
            if pdim:
                fh.write(np.asarray(traj.abs_next_sim, dtype="<f4").tobytes())


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise IOError(f"truncated dataset file while reading {what}")
    return buf


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), "magic") != MAGIC:
            raise IOError(f"bad header in {path}")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise IOError(f"unsupported dataset version {version}")
        (pid_len,) = struct.unpack("<H", _read(fh, 2, "pair id"))
        pair_id = _read(fh, pid_len, "pair id").decode()
        seed, n_traj = struct.unpack("<qI", _read(fh, 12, "counts"))
        trajectories, split = [], []
        for _ in range(n_traj):
            t_seed, pol_len = struct.unpack("<qH", _read(fh, 10, "traj header"))
            policy_id = _read(fh, pol_len, "policy id").decode()
            augmented, spl, T, terminal, tdim, adim, pdim = struct.unpack(
                "<BBIBHHH", _read(fh, struct.calcsize("<BBIBHHH"), "traj header"))

            def arr(rows, cols, what):
                raw = _read(fh, 4 * rows * cols, what)
                return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)

            states = arr(T + 1, tdim, "states")
            actions = arr(T, adim, "actions")
            rewards = arr(T, 1, "rewards").ravel()
            dones = np.frombuffer(_read(fh, T, "dones"), dtype=np.uint8).copy()
            abs_next = arr(max(T - 1, 0), pdim, "paired") if pdim else None
            trajectories.append(Trajectory(
                seed=t_seed, states=states, actions=actions, rewards=rewards,
                dones=dones, terminal=terminal, policy_id=policy_id,
                augmented=bool(augmented), abs_next_sim=abs_next))
            split.append(spl)
    ds = Dataset(env_pair_id=pair_id, seed=seed, trajectories=trajectories,
                 split=split, version=version)
    return ds
