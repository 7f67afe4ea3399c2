"""State/action spaces, world maps, collision checking and rewards.

States and actions are plain 1-D float arrays.  An action is laid out as
``[u_1, ..., u_du, dt]``: the control vector followed by its duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import yaml

StateVec = np.ndarray
ActionVec = np.ndarray

# Number of sub-intervals used to sample a straight path for collision checks.
PATH_RESOLUTION = 50


class _ObstacleToken:
    """Singleton standing in for the absorbing collision state."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "S_OBS"


S_OBS = _ObstacleToken()

# Index used for the collision state inside transition supports.
OBS_INDEX = -1


def as_state(coords, world: "WorldMap | None" = None) -> StateVec:
    """Build a state vector, clamped into ``world.bounds`` when a map is given."""
    s = np.asarray(coords, dtype=float).reshape(-1)
    if not np.all(np.isfinite(s)):
        raise ValueError(f"state has non-finite entries: {s}")
    if world is not None:
        s = np.clip(s, world.lower, world.upper)
    return s


@dataclass(frozen=True)
class ActionSpace:
    """Box ``U x [t_min, t_max]``.

    ``periodic`` lists control dimensions that wrap around (e.g. push angle).
    A fixed duration is expressed with ``t_min == t_max``.
    """

    control_low: tuple
    control_high: tuple
    t_min: float
    t_max: float
    periodic: tuple = ()

    def __post_init__(self):
        if len(self.control_low) != len(self.control_high):
            raise ValueError("control bounds have different lengths")
        if not self.t_min > 0:
            raise ValueError("t_min must be positive")
        if self.t_max < self.t_min:
            raise ValueError("t_max < t_min")
        if any(lo > hi for lo, hi in zip(self.control_low, self.control_high)):
            raise ValueError("control_low > control_high")

    @property
    def d_u(self) -> int:
        return len(self.control_low)

    @property
    def dim(self) -> int:
        return self.d_u + 1

    @property
    def low(self) -> np.ndarray:
        return np.array(list(self.control_low) + [self.t_min], dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.array(list(self.control_high) + [self.t_max], dtype=float)

    @property
    def span(self) -> np.ndarray:
        return self.high - self.low

    def contains(self, a, atol: float = 1e-12) -> bool:
        a = np.asarray(a, dtype=float)
        return bool(
            a.shape == (self.dim,)
            and np.all(a >= self.low - atol)
            and np.all(a <= self.high + atol)
        )

    def make(self, control: Sequence[float], duration: float) -> ActionVec:
        a = np.array(list(np.atleast_1d(control)) + [duration], dtype=float)
        if not self.contains(a):
            raise ValueError(f"action {a} outside the action space")
        return a

    def from_unit(self, unit: np.ndarray) -> np.ndarray:
        """Map points of the unit cube onto the box."""
        return self.low + np.asarray(unit) * self.span

    def uniform(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (self.dim,) if n is None else (n, self.dim)
        return self.from_unit(rng.random(size))


def duration(a: ActionVec) -> float:
    return float(a[-1])


def action_distance(a1: ActionVec, a2: ActionVec, t_max: float) -> float:
    """Euclidean metric on ``(u, dt / t_max)``.  Only used by tests/theory."""
    d = np.asarray(a1, dtype=float) - np.asarray(a2, dtype=float)
    d[-1] /= t_max
    return float(np.linalg.norm(d))


def state_distance(s1: StateVec, s2: StateVec) -> float:
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if s1.shape != s2.shape:
        raise ValueError(f"dimension mismatch: {s1.shape} vs {s2.shape}")
    return float(np.linalg.norm(s1 - s2))


@dataclass(frozen=True)
class RectObstacle:
    lower: tuple
    upper: tuple

    def contains(self, points: np.ndarray, inflate: float = 0.0) -> np.ndarray:
        """Vectorised containment test over the last axis of ``points``."""
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        if inflate <= 0.0:
            return np.all((points >= lo) & (points <= hi), axis=-1)
        # Minkowski sum of the box with a disc: distance to box <= inflate.
        excess = np.maximum(lo - points, 0.0) + np.maximum(points - hi, 0.0)
        return np.einsum("...i,...i->...", excess, excess) <= inflate * inflate

    def sample_inside(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return lo + rng.random(lo.shape) * (hi - lo)


@dataclass(frozen=True)
class DiscObstacle:
    center: tuple
    radius: float

    def contains(self, points: np.ndarray, inflate: float = 0.0) -> np.ndarray:
        diff = points - np.asarray(self.center)
        r = self.radius + max(inflate, 0.0)
        return np.einsum("...i,...i->...", diff, diff) <= r * r

    def sample_inside(self, rng: np.random.Generator) -> np.ndarray:
        # 2-D disc; sqrt for uniform area density.
        rho = self.radius * math.sqrt(rng.random())
        phi = 2.0 * math.pi * rng.random()
        return np.asarray(self.center) + rho * np.array([math.cos(phi), math.sin(phi)])


Obstacle = Union[RectObstacle, DiscObstacle]


@dataclass(frozen=True)
class GoalRegion:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("goal region needs a positive radius")

    def contains(self, points: np.ndarray) -> np.ndarray:
        diff = np.asarray(points, dtype=float) - np.asarray(self.center)
        return np.einsum("...i,...i->...", diff, diff) <= self.radius**2


@dataclass(frozen=True)
class WorldMap:
    """Axis-aligned workspace with obstacles and a disc goal.

    ``object_radius`` inflates obstacles and shrinks the bounds, which is how
    the pushed cylinder is handled; it is zero for point robots.
    """

    lower: np.ndarray
    upper: np.ndarray
    goal: GoalRegion
    obstacles: tuple = ()
    start: np.ndarray | None = None
    object_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.start is not None:
            object.__setattr__(self, "start", np.asarray(self.start, dtype=float))
        if np.any(self.upper <= self.lower):
            raise ValueError("empty world bounds")
        for ob in self.obstacles:
            if isinstance(ob, RectObstacle):
                inside = np.all(np.asarray(ob.lower) >= self.lower) and np.all(
                    np.asarray(ob.upper) <= self.upper
                )
            else:
                c = np.asarray(ob.center)
                inside = np.all(c - ob.radius >= self.lower) and np.all(
                    c + ob.radius <= self.upper
                )
            if not inside:
                raise ValueError(f"obstacle {ob} leaves the world bounds")

        rects = [o for o in self.obstacles if isinstance(o, RectObstacle)]
        discs = [o for o in self.obstacles if isinstance(o, DiscObstacle)]
        d = self.lower.shape[0]
        object.__setattr__(self, "_rect_lo", np.array([o.lower for o in rects], dtype=float).reshape(-1, d))
        object.__setattr__(self, "_rect_hi", np.array([o.upper for o in rects], dtype=float).reshape(-1, d))
        object.__setattr__(self, "_disc_c", np.array([o.center for o in discs], dtype=float).reshape(-1, d))
        object.__setattr__(self, "_disc_r", np.array([o.radius for o in discs], dtype=float))

    def _obstacle_arrays(self, box_lo=None, box_hi=None):
        """Obstacle parameters, optionally culled to those touching a box."""
        r = self.object_radius
        rl, rh, dc, dr = self._rect_lo, self._rect_hi, self._disc_c, self._disc_r
        if box_lo is not None:
            keep = np.all((rl - r <= box_hi) & (rh + r >= box_lo), axis=1)
            rl, rh = rl[keep], rh[keep]
            keep = np.all((dc - dr[:, None] - r <= box_hi) & (dc + dr[:, None] + r >= box_lo), axis=1)
            dc, dr = dc[keep], dr[keep]
        return rl, rh, dc, dr

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def in_bounds(self, points: np.ndarray) -> np.ndarray:
        r = self.object_radius
        return np.all((points >= self.lower + r) & (points <= self.upper - r), axis=-1)

    def in_obstacle(self, points: np.ndarray, _arrays=None) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        rl, rh, dc, dr = self._obstacle_arrays() if _arrays is None else _arrays
        r = self.object_radius
        hit = np.zeros(points.shape[:-1], dtype=bool)
        # Work one coordinate at a time: (..., n_obstacles) arrays stay small.
        coords = [points[..., i, None] for i in range(points.shape[-1])]
        if rl.shape[0]:
            if r > 0:
                d2 = sum(np.maximum(np.maximum(rl[:, i] - x, x - rh[:, i]), 0.0) ** 2
                         for i, x in enumerate(coords))
                hit |= np.any(d2 <= r * r, axis=-1)
            else:
                inside = np.ones(points.shape[:-1] + (rl.shape[0],), dtype=bool)
                for i, x in enumerate(coords):
                    inside &= (x >= rl[:, i]) & (x <= rh[:, i])
                hit |= np.any(inside, axis=-1)
        if dc.shape[0]:
            d2 = sum((x - dc[:, i]) ** 2 for i, x in enumerate(coords))
            hit |= np.any(d2 <= (dr + r) ** 2, axis=-1)
        return hit

    def is_free(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.in_bounds(points) & ~self.in_obstacle(points)

    def in_goal(self, points: np.ndarray) -> np.ndarray:
        return self.goal.contains(points)

    def uniform_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.lower + rng.random(self.dim) * (self.upper - self.lower)


def _path_points(s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    t = np.linspace(0.0, 1.0, PATH_RESOLUTION + 1)
    if s_next.ndim == 1:
        return s + t[:, None] * (s_next - s)
    # (n_steps, n_targets, d)
    return s + t[:, None, None] * (s_next - s)[None, :, :]


def exists_collision(s: StateVec, a: ActionVec | None, s_next: StateVec, world: WorldMap) -> bool:
    """Check the straight path ``s -> s_next`` against obstacles and bounds.

    The action is accepted for interface compatibility; the path model is the
    straight segment sampled at ``PATH_RESOLUTION`` sub-intervals.
    """
    pts = _path_points(np.asarray(s, dtype=float), np.asarray(s_next, dtype=float))
    return bool(not np.all(world.is_free(pts)))


def _segments_near(s: np.ndarray, targets: np.ndarray, world: WorldMap) -> np.ndarray:
    """Conservative mask of segments ``s -> target`` that may touch an obstacle.

    Rectangles are grown by the object radius into larger boxes and tested
    with the slab method; discs by segment-to-centre distance.  A ``False``
    entry guarantees that no point of the segment is inside an obstacle.
    """
    rl, rh, dc, dr = world._obstacle_arrays()
    r = world.object_radius
    d = targets - s  # (n, dim)
    near = np.zeros(targets.shape[0], dtype=bool)
    if rl.shape[0]:
        t0 = np.zeros((targets.shape[0], rl.shape[0]))
        t1 = np.ones_like(t0)
        for i in range(targets.shape[1]):
            di = d[:, i, None]
            lo = rl[:, i] - r - s[i]
            hi = rh[:, i] + r - s[i]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                a = lo / di
                b = hi / di
            flat = di == 0.0
            inside = (lo <= 0.0) & (hi >= 0.0)
            a = np.where(flat, np.where(inside, -np.inf, np.inf), a)
            b = np.where(flat, np.where(inside, np.inf, -np.inf), b)
            t0 = np.maximum(t0, np.minimum(a, b))
            t1 = np.minimum(t1, np.maximum(a, b))
        near |= np.any(t0 <= t1, axis=1)
    if dc.shape[0]:
        dd = np.einsum("ij,ij->i", d, d)[:, None]
        rel = dc[None, :, :] - s
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.clip(np.einsum("nk,mk->nm", d, dc - s) / dd, 0.0, 1.0)
        t = np.where(dd > 0, t, 0.0)
        closest = t[:, :, None] * d[:, None, :]
        gap = np.einsum("nmk,nmk->nm", rel - closest, rel - closest)
        near |= np.any(gap <= (dr + r) ** 2 * (1 + 1e-12), axis=1)
    return near


def collisions_many(s: StateVec, targets: np.ndarray, world: WorldMap) -> np.ndarray:
    """Vectorised :func:`exists_collision` from one state to many targets.

    The bounds are convex, so only endpoints need the bounds test; segments
    that clear a conservative obstacle test skip the sampled path check.
    """
    s = np.asarray(s, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    hit = ~(world.in_bounds(targets) & bool(world.in_bounds(s)))
    check = np.flatnonzero(~hit & _segments_near(s, targets, world))
    if check.size:
        pts = _path_points(s, targets[check])
        hit[check] = np.any(world.in_obstacle(pts), axis=0)
    return hit


@dataclass(frozen=True)
class RewardSpec:
    action_cost: float = -1.0
    obstacle_cost: float = -10.0
    goal_reward: float = 100.0
    gamma: float = 0.99

    def __post_init__(self):
        if not (self.goal_reward > 0 > self.action_cost > self.obstacle_cost):
            raise ValueError("need goal_reward > 0 > action_cost > obstacle_cost")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


def reward(s: StateVec, a: ActionVec, s_next, spec: RewardSpec, world: WorldMap) -> float:
    """Immediate reward of one transition; ``s_next`` may be :data:`S_OBS`."""
    if s_next is S_OBS:
        return spec.obstacle_cost
    if bool(world.in_goal(np.asarray(s_next, dtype=float))):
        return spec.goal_reward
    return spec.action_cost


@dataclass
class Dataset:
    """Displacement records ``(a_i, ds_i)``; rows of ``actions`` are action vectors."""

    actions: np.ndarray
    deltas: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.deltas = np.atleast_2d(np.asarray(self.deltas, dtype=float))
        if self.actions.shape[0] != self.deltas.shape[0]:
            raise ValueError("actions and deltas have different lengths")
        if not (np.all(np.isfinite(self.actions)) and np.all(np.isfinite(self.deltas))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return self.actions.shape[0]

    def record(self, i: int) -> "DatasetRecord":
        return DatasetRecord(self.actions[i].copy(), self.deltas[i].copy())

    @property
    def d_u(self) -> int:
        return self.actions.shape[1] - 1

    @property
    def d_s(self) -> int:
        return self.deltas.shape[1]

    @classmethod
    def from_transitions(cls, states, actions, next_states) -> "Dataset":
        """Reduce ``(s, a, s')`` triples to location-invariant ``(a, s' - s)``."""
        states = np.asarray(states, dtype=float)
        return cls(actions, np.asarray(next_states, dtype=float) - states)

    def header(self) -> list[str]:
        return (
            [f"u_{i + 1}" for i in range(self.d_u)]
            + ["dt"]
            + [f"ds_{i + 1}" for i in range(self.d_s)]
        )

    def save(self, path) -> None:
        """Write CSV (with header) or ``.npz`` depending on the suffix."""
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, actions=self.actions, deltas=self.deltas)
            return
        data = np.hstack([self.actions, self.deltas])
        np.savetxt(path, data, delimiter=",", header=",".join(self.header()), comments="", fmt="%.17g")

    @classmethod
    def load(cls, path, d_s: int = 2) -> "Dataset":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                return cls(z["actions"], z["deltas"])
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if "dt" not in header:
            raise ValueError(f"{path}: missing CSV header with a 'dt' column")
        n_act = header.index("dt") + 1
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != len(header):
            raise ValueError(f"{path}: header has {len(header)} columns, rows have {data.shape[1]}")
        return cls(data[:, :n_act], data[:, n_act:])


@dataclass(frozen=True)
class DatasetRecord:
    action: np.ndarray
    delta: np.ndarray


def _obstacle_from_dict(d: dict) -> Obstacle:
    kind = d.get("type")
    if kind == "rect":
        return RectObstacle(tuple(map(float, d["lower"])), tuple(map(float, d["upper"])))
    if kind == "disc":
        return DiscObstacle(tuple(map(float, d["center"])), float(d["radius"]))
    raise ValueError(f"unknown obstacle type {kind!r}")


MAP_KEYS = {"bounds", "obstacles", "goal", "start", "object_radius", "walls"}


def border_walls(lower, upper, thickness: float) -> tuple:
    """Four 2-D rectangles of the given thickness just inside the bounds."""
    (x0, y0), (x1, y1) = lower, upper
    t = thickness
    return (
        RectObstacle((x0, y0), (x1, y0 + t)),
        RectObstacle((x0, y1 - t), (x1, y1)),
        RectObstacle((x0, y0), (x0 + t, y1)),
        RectObstacle((x1 - t, y0), (x1, y1)),
    )


def world_from_dict(d: dict) -> WorldMap:
    """Build a :class:`WorldMap` from a parsed config mapping.

    Keys: ``bounds: {lower, upper}``, ``obstacles: [{type: rect, lower, upper}
    | {type: disc, center, radius}]``, ``goal: {center, radius}``, optional
    ``start`` and ``object_radius``.
    """
    unknown = set(d) - MAP_KEYS
    if unknown:
        raise ValueError(f"unknown map keys: {sorted(unknown)}")
    goal = GoalRegion(tuple(map(float, d["goal"]["center"])), float(d["goal"]["radius"]))
    obstacles = tuple(_obstacle_from_dict(o) for o in d.get("obstacles", []))
    if d.get("walls"):
        obstacles += border_walls(d["bounds"]["lower"], d["bounds"]["upper"], float(d["walls"]))
    return WorldMap(
        lower=d["bounds"]["lower"],
        upper=d["bounds"]["upper"],
        goal=goal,
        obstacles=obstacles,
        start=d.get("start"),
        object_radius=float(d.get("object_radius", 0.0)),
    )


def load_world(path) -> WorldMap:
    with open(path) as fh:
        return world_from_dict(yaml.safe_load(fh))
