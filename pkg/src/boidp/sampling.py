"""RRT-style state sampling: interior states by forward simulation, boundary
states on obstacle surfaces."""

from __future__ import annotations

import csv
import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from .domain import ActionSpace, WorldMap, collisions_many

logger = logging.getLogger(__name__)

KDTREE_THRESHOLD = 4096
MAX_EXTENSION_ATTEMPTS = 10**6


class SamplingBudgetError(RuntimeError):
    """Raised when no goal state could be sampled within the attempt budget."""


class SampledStateSet:
    """Ordered state set with boundary/goal flags and RRT parent pointers.

    Index 0 is the start state.  ``generation`` increases on every growth so
    caches keyed on the set can detect staleness.
    """

    def __init__(self, start, world: WorldMap):
        start = np.asarray(start, dtype=float)
        self.world = world
        self._buf = np.empty((64, start.shape[0]))
        self._buf[0] = start
        self._n = 1
        self.boundary_flags = [False]
        self.goal_flags = [bool(world.in_goal(start))]
        self.parents = [-1]
        self.generation = 0
        self._array = None
        self._tree = None
        self._interior_idx = None

    @classmethod
    def from_arrays(cls, states, boundary, world: WorldMap) -> "SampledStateSet":
        """Rebuild a set from stored coordinates and boundary flags."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out = cls(states[0], world)
        for s, b in zip(states[1:], boundary[1:]):
            out.add(s, boundary=bool(b))
        return out

    def __len__(self):
        return self._n

    def add(self, s, boundary: bool = False, parent: int = -1) -> int:
        s = np.asarray(s, dtype=float)
        if self._n == self._buf.shape[0]:
            self._buf = np.concatenate([self._buf, np.empty_like(self._buf)])
        self._buf[self._n] = s
        self._n += 1
        self.boundary_flags.append(bool(boundary))
        self.goal_flags.append(bool(self.world.in_goal(s)) and not boundary)
        self.parents.append(parent)
        self.generation += 1
        self._array = None
        self._tree = None
        self._interior_idx = None
        return self._n - 1

    @property
    def states(self) -> np.ndarray:
        if self._array is None:
            self._array = self._buf[:self._n]
            self._array.flags.writeable = False
        return self._array

    @property
    def boundary(self) -> np.ndarray:
        return np.asarray(self.boundary_flags, dtype=bool)

    @property
    def goal(self) -> np.ndarray:
        return np.asarray(self.goal_flags, dtype=bool)

    def has_goal(self) -> bool:
        return any(self.goal_flags)

    def interior_indices(self) -> np.ndarray:
        if self._interior_idx is None:
            self._interior_idx = np.flatnonzero(~self.boundary)
        return self._interior_idx

    def nearest(self, s, interior_only: bool = False) -> int:
        """Index of the closest state (ties go to the lowest index)."""
        s = np.asarray(s, dtype=float)
        if interior_only:
            idx = self.interior_indices()
            return int(idx[_nearest_in(self.states[idx], s, None)])
        if len(self) > KDTREE_THRESHOLD and self._tree is None:
            self._tree = cKDTree(self.states)
        return _nearest_in(self.states, s, self._tree if len(self) > KDTREE_THRESHOLD else None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"s_{i + 1}" for i in range(self.world.dim)] + ["boundary", "goal", "parent"])
            for i, s in enumerate(self.states):
                w.writerow([i, *(repr(float(v)) for v in s), int(self.boundary_flags[i]),
                            int(self.goal_flags[i]), self.parents[i]])


def _nearest_in(points: np.ndarray, s: np.ndarray, tree) -> int:
    if tree is None:
        d2 = ((points - s) ** 2).sum(axis=1)
        return int(np.argmin(d2))
    k = min(8, points.shape[0])
    dist, idx = tree.query(s, k=k)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    ties = idx[dist <= dist[0]]
    if ties.size == k:  # more ties than queried; fall back to an exact scan
        return _nearest_in(points, s, None)
    return int(ties.min())


def nearest(state_set: SampledStateSet, s) -> int:
    return state_set.nearest(s)


def rrt_extend(s_nearest, s_rand, density, world: WorldMap, rng: np.random.Generator,
               action_space: ActionSpace, n_action_tries: int = 10):
    """Try ``n_action_tries`` uniform actions from ``s_nearest``; keep the
    collision-free sampled successor closest to ``s_rand``.

    Returns ``(s_new, action)`` or ``None`` when every sample collides.
    """
    if n_action_tries < 1:
        raise ValueError("n_action_tries must be >= 1")
    s_nearest = np.asarray(s_nearest, dtype=float)
    actions = action_space.uniform(rng, n_action_tries)
    succ = np.vstack([s_nearest + np.asarray(density.sample(a, rng), dtype=float) for a in actions])
    ok = ~collisions_many(s_nearest, succ, world)
    if not np.any(ok):
        return None
    d = np.linalg.norm(succ - np.asarray(s_rand, dtype=float), axis=1)
    d[~ok] = np.inf
    best = int(np.argmin(d))
    return succ[best], actions[best]


def sample_interior_states(n: int, state_set: SampledStateSet, world: WorldMap, density,
                           rng: np.random.Generator, action_space: ActionSpace,
                           n_action_tries: int = 10, max_attempts: int = MAX_EXTENSION_ATTEMPTS) -> int:
    """Add ``n`` interior states, continuing until a goal state is present.

    Returns the number of states added.
    """
    added = 0
    attempts = 0
    while added < n or not state_set.has_goal():
        if attempts >= max_attempts:
            raise SamplingBudgetError("goal unreachable under sampling budget")
        attempts += 1
        s_rand = world.uniform_state(rng)
        parent = state_set.nearest(s_rand, interior_only=True)
        res = rrt_extend(state_set.states[parent], s_rand, density, world, rng,
                         action_space, n_action_tries)
        if res is not None:
            state_set.add(res[0], boundary=False, parent=parent)
            added += 1
    return added


def _surface_point(world: WorldMap, free: np.ndarray, target: np.ndarray, tol: float) -> np.ndarray | None:
    """Walk ``free -> target`` and bisect the first colliding step.

    Returns the free-side point within ``tol`` of the surface.
    """
    length = float(np.linalg.norm(target - free))
    if length == 0.0:
        return None
    n_steps = max(1, int(math.ceil(length / 0.05)))
    t = np.linspace(0.0, 1.0, n_steps + 1)
    pts = free + t[:, None] * (target - free)
    bad = np.flatnonzero(~world.is_free(pts))
    if bad.size == 0 or bad[0] == 0:
        return None
    lo, hi = t[bad[0] - 1], t[bad[0]]
    while (hi - lo) * length > tol:
        mid = 0.5 * (lo + hi)
        if bool(world.is_free(free + mid * (target - free))):
            lo = mid
        else:
            hi = mid
    return free + lo * (target - free)


def sample_boundary_states(n: int, state_set: SampledStateSet, world: WorldMap, density,
                           rng: np.random.Generator, tol: float = 1e-6) -> bool:
    """Add ``n`` states on obstacle surfaces.

    A point is drawn uniformly inside a random obstacle; the path from the
    nearest free interior state towards it is walked until it first collides,
    and the free side of that step is bisected down to ``tol``.  Returns
    ``False`` (and adds nothing) when the map has no obstacles.
    """
    if n <= 0:
        return True
    if not world.obstacles:
        logger.warning("no obstacles: boundary sampling skipped")
        return False
    added = 0
    attempts = 0
    while added < n:
        attempts += 1
        if attempts > 1000 * n + 1000:
            logger.warning("boundary sampling stalled after %d attempts", attempts)
            break
        ob = world.obstacles[rng.integers(len(world.obstacles))]
        target = ob.sample_inside(rng)
        idx = state_set.interior_indices()
        parent = int(idx[_nearest_in(state_set.states[idx], target, None)])
        p = _surface_point(world, state_set.states[parent], target, tol)
        if p is None:
            continue
        state_set.add(p, boundary=True, parent=parent)
        added += 1
    return True


def sample_states(n_min: int, state_set: SampledStateSet, world: WorldMap, density,
                  rng: np.random.Generator, action_space: ActionSpace, n_action_tries: int = 10,
                  max_attempts: int = MAX_EXTENSION_ATTEMPTS) -> SampledStateSet:
    """Grow the set by ``ceil(n_min/2)`` interior and ``ceil(n_min/2)`` boundary states."""
    if n_min < 2:
        raise ValueError("n_min must be >= 2")
    half = math.ceil(n_min / 2)
    sample_interior_states(half, state_set, world, density, rng, action_space,
                           n_action_tries, max_attempts)
    sample_boundary_states(half, state_set, world, density, rng)
    return state_set
