"""Maze geometry: wall segments, collision tests, goal tests, config files.

Maze config format: ``key=value`` lines plus one wall segment per
``wall=x1 y1 x2 y2`` line (a bare line of four floats is also accepted as
a wall).  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_EDGE_EPS = 1e-3  # back-off from a wall at the collision point


@dataclass
class MazeSpec:
    name: str
    walls: np.ndarray          # (n, 4) rows of x1 y1 x2 y2
    start: np.ndarray          # (2,) mean start position
    start_theta: float         # mean start heading
    start_std: float           # Gaussian std on start position
    goal: np.ndarray           # (2,)
    goal_radius: float
    bounds: np.ndarray         # (4,) xmin ymin xmax ymax
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.goal_radius <= 0:
            raise ValueError("goal radius must be positive")
        for label, p in (("start", self.start), ("goal", self.goal)):
            if not self.contains(p):
                raise ValueError(f"{label} position {p} lies outside the arena")

    def contains(self, p) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def at_goal(self, p) -> bool:
        return float(np.hypot(p[0] - self.goal[0], p[1] - self.goal[1])) <= self.goal_radius


def crossing_param(p0, p1, walls) -> float:
    """Earliest parameter t in [0, 1] at which p0 + t (p1 - p0) crosses a
    wall segment, or inf if the motion is collision free.

    Parallel (collinear) contacts are not counted as crossings.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    if walls.size == 0:
        return np.inf
    w0 = walls[:, 0:2]
    e = walls[:, 2:4] - w0
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = w0 - p0
        t = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom
        u = (rel[:, 0] * d[1] - rel[:, 1] * d[0]) / denom
    hit = (np.abs(denom) > 0) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
    if not np.any(hit):
        return np.inf
    return float(np.min(t[hit]))


def goal_entry_param(p0, p1, goal, radius) -> float:
    """Earliest t in [0, 1] at which the motion enters the goal disc."""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    f = p0 - np.asarray(goal, dtype=np.float64)
    if float(f @ f) <= radius * radius:
        return 0.0
    a = float(d @ d)
    if a == 0.0:
        return np.inf
    b = 2.0 * float(f @ d)
    c = float(f @ f) - radius * radius
    disc = b * b - 4 * a * c
    if disc < 0:
        return np.inf
    t = (-b - np.sqrt(disc)) / (2 * a)
    if 0.0 <= t <= 1.0:
        return float(t)
    return np.inf


def resolve_motion(p0, p1, spec: MazeSpec):
    """Classify a motion segment against walls and the goal disc.

    Returns ``(end_point, event)`` where event is "collision", "goal", or
    None; the earliest event along the segment wins.  On collision the end
    point is backed off slightly from the wall.
    """
    t_wall = crossing_param(p0, p1, spec.walls)
    t_goal = goal_entry_param(p0, p1, spec.goal, spec.goal_radius)
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if t_wall is not np.inf and t_wall <= t_goal:
        t = max(t_wall - _EDGE_EPS, 0.0)
        return p0 + t * (p1 - p0), "collision"
    if t_goal is not np.inf:
        return p1.copy(), "goal"
    return p1.copy(), None


def _segments_cross_any(p0, p1, walls) -> np.ndarray:
    """Vectorized: does each segment p0[i]->p1[i] cross any wall?"""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    if walls.size == 0:
        return np.zeros(len(p0), dtype=bool)
    w0 = walls[None, :, 0:2]
    e = (walls[:, 2:4] - walls[:, 0:2])[None]
    rel = w0 - p0[:, None, :]
    denom = d[:, None, 0] * e[..., 1] - d[:, None, 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[..., 0] * e[..., 1] - rel[..., 1] * e[..., 0]) / denom
        u = (rel[..., 0] * d[:, None, 1] - rel[..., 1] * d[:, None, 0]) / denom
    hit = (np.abs(denom) > 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return hit.any(axis=1)


GEO_RESOLUTION = 0.05


def geodesic_field(spec: MazeSpec, resolution=GEO_RESOLUTION) -> dict:
    """Shortest-path distance to the goal disc through free space.

    Dijkstra on an 8-connected grid of cell centers; moves whose segment
    crosses a wall are blocked.  Cached on the spec, so each maze pays the
    build cost once.  Unreachable cells get the largest finite distance.
    """
    cached = spec.extra.get("_geodesic")
    if cached is not None and cached["resolution"] == resolution:
        return cached
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    xmin, ymin, xmax, ymax = spec.bounds
    nx = max(1, int(round((xmax - xmin) / resolution)))
    ny = max(1, int(round((ymax - ymin) / resolution)))
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)    # cell i*ny + j

    rows, cols, costs = [], [], []
    for di, dj, cost in ((1, 0, resolution), (0, 1, resolution),
                         (1, 1, resolution * np.sqrt(2.0)),
                         (1, -1, resolution * np.sqrt(2.0))):
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        src_i, src_j = ii.ravel(), jj.ravel()
        dst_i, dst_j = src_i + di, src_j + dj
        ok = (dst_i >= 0) & (dst_i < nx) & (dst_j >= 0) & (dst_j < ny)
        src = (src_i * ny + src_j)[ok]
        dst = (dst_i * ny + dst_j)[ok]
        open_ = ~_segments_cross_any(centers[src], centers[dst], spec.walls)
        src, dst = src[open_], dst[open_]
        rows.extend([src, dst])
        cols.extend([dst, src])
        costs.extend([np.full(len(src), cost)] * 2)
    graph = coo_matrix(
        (np.concatenate(costs), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny, nx * ny)).tocsr()

    in_goal = (np.hypot(centers[:, 0] - spec.goal[0],
                        centers[:, 1] - spec.goal[1]) <= spec.goal_radius)
    if not in_goal.any():
        in_goal[np.argmin(np.hypot(centers[:, 0] - spec.goal[0],
                                   centers[:, 1] - spec.goal[1]))] = True
    dist = dijkstra(graph, indices=np.flatnonzero(in_goal), min_only=True)
    finite = np.isfinite(dist)
    if not finite.all():
        dist[~finite] = dist[finite].max() if finite.any() else 0.0
    field = {
        "resolution": resolution, "nx": nx, "ny": ny,
        "xmin": xmin, "ymin": ymin,
        "dist": dist.reshape(nx, ny),
    }
    spec.extra["_geodesic"] = field
    return field


def geodesic_distance(spec: MazeSpec, p) -> float:
    """Distance from ``p`` to the goal disc along free space (meters).

    Bilinear interpolation between cell centers keeps the value (and
    hence the reward shaping) continuous in the position.
    """
    f = geodesic_field(spec)
    res, nx, ny = f["resolution"], f["nx"], f["ny"]
    gx = np.clip((p[0] - f["xmin"]) / res - 0.5, 0.0, nx - 1.0)
    gy = np.clip((p[1] - f["ymin"]) / res - 0.5, 0.0, ny - 1.0)
    i0, j0 = int(gx), int(gy)
    i1, j1 = min(i0 + 1, nx - 1), min(j0 + 1, ny - 1)
    fx, fy = gx - i0, gy - j0
    d = f["dist"]
    top = d[i0, j0] * (1 - fx) + d[i1, j0] * fx
    bot = d[i0, j1] * (1 - fx) + d[i1, j1] * fx
    return float(top * (1 - fy) + bot * fy)


def parse_maze_config(text: str, name="maze") -> MazeSpec:
    walls = []
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "wall":
                walls.append([float(v) for v in value.split()])
            else:
                kv[key] = value
        else:
            parts = line.split()
            if len(parts) == 4:
                walls.append([float(v) for v in parts])
            else:
                raise ValueError(f"unparseable maze config line: {raw!r}")
    bounds = np.array([float(v) for v in kv["bounds"].split()])
    return MazeSpec(
        name=kv.get("name", name),
        walls=np.array(walls, dtype=np.float64).reshape(-1, 4),
        start=np.array([float(v) for v in kv["start"].split()]),
        start_theta=float(kv.get("start_theta", 0.0)),
        start_std=float(kv.get("start_std", 0.05)),
        goal=np.array([float(v) for v in kv["goal"].split()]),
        goal_radius=float(kv.get("goal_radius", 0.3)),
        bounds=bounds,
        extra={k: v for k, v in kv.items()
               if k not in {"name", "bounds", "start", "start_theta",
                            "start_std", "goal", "goal_radius"}},
    )


def load_maze(name_or_path) -> MazeSpec:
    """Load a built-in maze by name ("umaze", "longmaze") or a file path."""
    path = Path(name_or_path)
    if path.suffix == ".cfg" and path.exists():
        return parse_maze_config(path.read_text(), name=path.stem)
    from importlib import resources

    ref = resources.files("astra_lab") / "configs" / f"{name_or_path}.cfg"
    return parse_maze_config(ref.read_text(), name=str(name_or_path))
