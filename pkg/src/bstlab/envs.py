"""Toy continuous-control environments and behavior-policy data generation.

Two environments:

- FourModeBandit: one zero state, 2-D actions, single-step episodes. The
  action space holds four reward modes; the dataset generator in
  ``datasets`` draws from Gaussians at those modes.
- PointMaze: continuous navigation over a unit-cell ASCII maze with sparse
  goal reward. Datasets are generated by noisy waypoint followers between
  RANDOM cell pairs, so almost no single episode solves the maze and a
  learner must stitch segments together.

Maze coordinates are (x, y) with x along columns and y along rows; cell
(row, col) spans [col, col+1) x [row, row+1).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .datasets import ReplayDataset
from .errors import ConfigError, StateError
from .validation import as_vector

__all__ = [
    "EnvSpec",
    "make_env",
    "FourModeBandit",
    "PointMaze",
    "MazeGrid",
    "parse_layout",
    "bfs_path",
    "WaypointController",
    "oracle_policy",
    "generate_maze_dataset",
    "BUILTIN_LAYOUTS",
]

BUILTIN_LAYOUTS = {
    # Goal behind a wall from the start: the direct line is blocked and the
    # only corridor doubles back, so end-to-end demonstrations are rare.
    "umaze": "\n".join(
        [
            "#####",
            "#G..#",
            "###.#",
            "#S..#",
            "#####",
        ]
    ),
    # Larger analog with several loops and dead ends.
    "large": "\n".join(
        [
            "############",
            "#G.....#...#",
            "#.###.##.#.#",
            "#.#...#..#.#",
            "#.#.#.#.##.#",
            "#.#.#.#..#.#",
            "#.#.#.##.#.#",
            "#...#....#S#",
            "############",
        ]
    ),
}


@dataclass(frozen=True)
class MazeGrid:
    """Parsed maze: wall mask, start candidates, goal cell (row, col)."""

    walls: np.ndarray
    starts: tuple
    goal: tuple

    @property
    def shape(self):
        return self.walls.shape

    def is_wall(self, row: int, col: int) -> bool:
        if row < 0 or col < 0 or row >= self.walls.shape[0] or col >= self.walls.shape[1]:
            return True
        return bool(self.walls[row, col])

    def free_cells(self):
        rows, cols = np.nonzero(~self.walls)
        return list(zip(rows.tolist(), cols.tolist()))


def parse_layout(text: str) -> MazeGrid:
    """Parse an ASCII maze: '#' wall, '.' free, 'S' start, 'G' goal."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise ConfigError("maze layout is empty")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise ConfigError("maze layout rows have unequal lengths")
    walls = np.zeros((len(lines), width), dtype=bool)
    starts, goals = [], []
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "#":
                walls[r, c] = True
            elif ch == "S":
                starts.append((r, c))
            elif ch == "G":
                goals.append((r, c))
            elif ch != ".":
                raise ConfigError(f"invalid maze character {ch!r} at row {r}, col {c}")
    if len(goals) != 1:
        raise ConfigError(f"maze must have exactly one goal cell, found {len(goals)}")
    if not starts:
        raise ConfigError("maze must have at least one start cell")
    return MazeGrid(walls=walls, starts=tuple(starts), goal=goals[0])


def bfs_path(grid: MazeGrid, start: tuple, end: tuple):
    """Shortest 4-neighbor path between free cells, or None if unreachable."""
    if grid.is_wall(*start) or grid.is_wall(*end):
        return None
    prev = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == end:
            path = []
            while cell is not None:
                path.append(cell)
                cell = prev[cell]
            return path[::-1]
        r, c = cell
        for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if nxt not in prev and not grid.is_wall(*nxt):
                prev[nxt] = cell
                queue.append(nxt)
    return None


def is_connected(grid: MazeGrid) -> bool:
    free = grid.free_cells()
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        r, c = queue.popleft()
        for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if nxt not in seen and not grid.is_wall(*nxt):
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(free)


def cell_center(cell: tuple) -> np.ndarray:
    r, c = cell
    return np.array([c + 0.5, r + 0.5])


@dataclass(frozen=True)
class EnvSpec:
    """Environment selector plus the knobs shared by the harness."""

    kind: str = "point_maze"
    layout: str = "umaze"
    horizon: int = 300
    step_scale: float = 0.15
    goal_radius: float = 0.3

    def __post_init__(self):
        if self.kind not in ("four_mode_bandit", "point_maze"):
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.step_scale <= 0 or self.goal_radius <= 0:
            raise ConfigError("step_scale and goal_radius must be > 0")


def make_env(spec: EnvSpec):
    if spec.kind == "four_mode_bandit":
        return FourModeBandit(horizon=1)
    text = BUILTIN_LAYOUTS.get(spec.layout, spec.layout)
    grid = parse_layout(text)
    return PointMaze(
        grid,
        step_scale=spec.step_scale,
        goal_radius=spec.goal_radius,
        horizon=spec.horizon,
    )


class FourModeBandit:
    """Single-step environment whose reward depends on the chosen mode.

    Actions within ``reward_radius`` of a mode center earn that mode's
    constant reward; anything else earns zero. Every episode is one step.
    """

    state_dim = 2
    action_dim = 2
    reward_radius = 0.3

    def __init__(self, horizon: int = 1):
        from .datasets import FOUR_MODE_CENTERS, FOUR_MODE_REWARDS

        self.horizon = horizon
        self.centers = FOUR_MODE_CENTERS
        self.rewards = FOUR_MODE_REWARDS

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(2)

    def step(self, s, a):
        a = np.clip(as_vector(a, "action", size=2), -1.0, 1.0)
        dists = np.linalg.norm(self.centers - a, axis=1)
        i = int(np.argmin(dists))
        r = float(self.rewards[i]) if dists[i] <= self.reward_radius else 0.0
        return np.zeros(2), r, True


class PointMaze:
    """Continuous point navigation with exact wall stopping.

    A step moves the point by step_scale * action unless the segment hits a
    wall, in which case motion stops at the wall face (no sliding). The
    only reward is 1 on entering the goal disc, which also terminates the
    episode.
    """

    state_dim = 2
    action_dim = 2

    def __init__(
        self,
        grid: MazeGrid,
        step_scale: float = 0.15,
        goal_radius: float = 0.3,
        horizon: int = 300,
    ):
        self.grid = grid
        self.step_scale = step_scale
        self.goal_radius = goal_radius
        self.horizon = horizon
        self.goal_pos = cell_center(grid.goal)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        cell = self.grid.starts[int(rng.integers(0, len(self.grid.starts)))]
        return cell_center(cell)

    def in_goal(self, p) -> bool:
        return float(np.linalg.norm(np.asarray(p) - self.goal_pos)) <= self.goal_radius

    def _cell_of(self, p):
        return int(np.floor(p[1])), int(np.floor(p[0]))

    def step(self, s, a):
        p = as_vector(np.asarray(s, dtype=np.float64).copy(), "state", size=2)
        if self.grid.is_wall(*self._cell_of(p)):
            raise StateError(f"state {p.tolist()} is inside a wall")
        a = np.clip(as_vector(a, "action", size=2), -1.0, 1.0)
        q = self._traverse(p, self.step_scale * a)
        if self.in_goal(q):
            return q, 1.0, True
        return q, 0.0, False

    def _traverse(self, p, d) -> np.ndarray:
        """Move along the segment p -> p + d, stopping at the first wall face."""
        if d[0] == 0.0 and d[1] == 0.0:
            return p
        cx, cy = int(np.floor(p[0])), int(np.floor(p[1]))
        step = np.array([1 if d[0] > 0 else -1, 1 if d[1] > 0 else -1])
        t_max = np.empty(2)
        t_delta = np.empty(2)
        for i in range(2):
            if d[i] > 0:
                t_max[i] = (np.floor(p[i]) + 1.0 - p[i]) / d[i]
                t_delta[i] = 1.0 / d[i]
            elif d[i] < 0:
                t_max[i] = (np.floor(p[i]) - p[i]) / d[i]
                t_delta[i] = -1.0 / d[i]
            else:
                t_max[i] = np.inf
                t_delta[i] = np.inf
        while True:
            t_next = min(t_max[0], t_max[1])
            if t_next > 1.0:
                q = p + d
                # Guard the measure-zero case of landing exactly on the
                # face of a wall cell.
                if self.grid.is_wall(*self._cell_of(q)):
                    q = p + (1.0 - 1e-9) * d
                    if self.grid.is_wall(*self._cell_of(q)):
                        return p
                return q
            cross = np.abs(t_max - t_next) < 1e-12
            ncx = cx + (int(step[0]) if cross[0] else 0)
            ncy = cy + (int(step[1]) if cross[1] else 0)
            blocked = self.grid.is_wall(ncy, ncx)
            if cross[0] and cross[1]:
                # Passing exactly through a corner: treat flanking walls as
                # blocking too, a point cannot squeeze between them.
                blocked = (
                    blocked
                    or self.grid.is_wall(cy, cx + int(step[0]))
                    or self.grid.is_wall(cy + int(step[1]), cx)
                )
            if blocked:
                q = p + t_next * d
                if cross[0]:
                    boundary = cx + (1 if step[0] > 0 else 0)
                    q[0] = boundary - step[0] * 1e-9
                if cross[1]:
                    boundary = cy + (1 if step[1] > 0 else 0)
                    q[1] = boundary - step[1] * 1e-9
                return q
            cx, cy = ncx, ncy
            if cross[0]:
                t_max[0] += t_delta[0]
            if cross[1]:
                t_max[1] += t_delta[1]


class WaypointController:
    """Noisy proportional controller chasing a fixed waypoint list."""

    def __init__(
        self,
        maze: PointMaze,
        waypoints,
        noise_scale: float,
        rng: np.random.Generator,
        waypoint_radius: float = 0.25,
    ):
        self.maze = maze
        self.waypoints = [np.asarray(w, dtype=np.float64) for w in waypoints]
        self.noise_scale = noise_scale
        self.rng = rng
        self.radius = waypoint_radius
        self.idx = 0

    def _advance(self, p):
        while (
            self.idx < len(self.waypoints) - 1
            and np.linalg.norm(self.waypoints[self.idx] - p) <= self.radius
        ):
            self.idx += 1

    def arrived(self, s) -> bool:
        p = np.asarray(s, dtype=np.float64)
        self._advance(p)
        return (
            self.idx == len(self.waypoints) - 1
            and np.linalg.norm(self.waypoints[-1] - p) <= self.radius
        )

    def __call__(self, s) -> np.ndarray:
        p = np.asarray(s, dtype=np.float64)
        self._advance(p)
        a = (self.waypoints[self.idx] - p) / self.maze.step_scale
        if self.noise_scale > 0:
            a = a + self.rng.normal(0.0, self.noise_scale, size=2)
        return np.clip(a, -1.0, 1.0)


def oracle_policy(maze: PointMaze):
    """Deterministic goal-seeking controller; replans from scratch per step."""

    def policy(s):
        p = np.asarray(s, dtype=np.float64)
        cell = maze._cell_of(p)
        path = bfs_path(maze.grid, cell, maze.grid.goal)
        if path is None:
            return np.zeros(2)
        target = cell_center(path[1]) if len(path) > 1 else maze.goal_pos
        return np.clip((target - p) / maze.step_scale, -1.0, 1.0)

    return policy


def generate_maze_dataset(
    spec: EnvSpec,
    n_episodes: int,
    seed: int,
    noise_scale: float = 0.3,
    waypoint_radius: float = 0.25,
) -> ReplayDataset:
    """Offline data from noisy waypoint followers between random cell pairs.

    Start and target cells are drawn independently per episode, so episodes
    that happen to run start-to-goal are rare; the measured fraction is
    recorded in the manifest and a learner has to stitch partial paths.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    if spec.kind != "point_maze":
        raise ConfigError("maze dataset generation needs a point_maze spec")
    maze = make_env(spec)
    grid = maze.grid
    if not is_connected(grid):
        raise ConfigError("maze free space is disconnected")
    free = grid.free_cells()
    start_set = set(grid.starts)

    states, actions, rewards, next_states, dones = [], [], [], [], []
    boundaries = []
    end_to_end = 0
    goal_reached = 0
    episode_seeds = np.random.SeedSequence(seed).spawn(n_episodes)
    for ep_seed in episode_seeds:
        rng = np.random.default_rng(ep_seed)
        i = int(rng.integers(0, len(free)))
        j = int(rng.integers(0, len(free) - 1))
        if j >= i:
            j += 1
        from_cell, to_cell = free[i], free[j]
        path = bfs_path(grid, from_cell, to_cell)
        controller = WaypointController(
            maze,
            [cell_center(c) for c in path],
            noise_scale,
            rng,
            waypoint_radius,
        )
        s = cell_center(from_cell)
        hit_goal = False
        for _ in range(maze.horizon):
            a = controller(s)
            s2, r, done = maze.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            next_states.append(s2)
            dones.append(done)
            s = s2
            if done:
                hit_goal = True
                break
            if controller.arrived(s):
                break
        boundaries.append(len(states))
        if hit_goal:
            goal_reached += 1
            if from_cell in start_set:
                end_to_end += 1

    manifest = {
        "generator": "maze_waypoint_mix",
        "layout": spec.layout,
        "n_episodes": int(n_episodes),
        "seed": int(seed),
        "noise_scale": float(noise_scale),
        "waypoint_radius": float(waypoint_radius),
        "step_scale": float(spec.step_scale),
        "goal_radius": float(spec.goal_radius),
        "horizon": int(spec.horizon),
        "end_to_end_success_fraction": end_to_end / n_episodes,
        "goal_reach_fraction": goal_reached / n_episodes,
    }
    return ReplayDataset(
        states=np.stack(states),
        actions=np.stack(actions),
        rewards=np.array(rewards),
        next_states=np.stack(next_states),
        dones=np.array(dones),
        episode_boundaries=np.array(boundaries, dtype=np.uint64),
        source_manifest=manifest,
    )
