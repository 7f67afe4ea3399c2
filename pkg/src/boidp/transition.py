"""Discrete next-state distributions over the sampled state set.

A continuous displacement density is turned into a sparse distribution over
sampled states plus the absorbing collision state (support index ``-1``).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import OBS_INDEX, WorldMap, collisions_many

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class DiscreteTransition:
    """Sparse ``P(s' | s, a)``; ``support`` holds state indices, ``-1`` is s_obs.

    ``collided_fraction`` is the share of pre-normalisation density that was
    moved onto s_obs; ``fallback`` marks the empty-support rule.
    """

    support: np.ndarray
    probs: np.ndarray
    collided_fraction: float = 0.0
    fallback: bool = False
    raw_density: np.ndarray = field(default=None, repr=False)
    collided: np.ndarray = field(default=None, repr=False)

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.support[rng.choice(len(self.probs), p=self.probs)])

    def prob_of(self, idx: int) -> float:
        hit = np.flatnonzero(self.support == idx)
        return float(self.probs[hit[0]]) if hit.size else 0.0


def high_prob_next_states(densities, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Indices whose density exceeds ``epsilon``, in index order."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return np.flatnonzero(np.asarray(densities, dtype=float) > epsilon)


def _candidates(s, a, density, index, epsilon):
    """States that may exceed ``epsilon``, or ``None`` to scan everything."""
    if index is None or epsilon <= 0 or not hasattr(density, "mixture"):
        return None
    hits = set()
    for centre, radius in density.mixture(a).level_set_balls(epsilon):
        hits.update(index.query_ball_point(s + centre, radius))
    return np.array(sorted(hits), dtype=np.int64)


def transition_model(s: np.ndarray, a: np.ndarray, states: np.ndarray, density, world: WorldMap,
                     epsilon: float = DEFAULT_EPSILON, boundary: np.ndarray | None = None,
                     counter: dict | None = None, index=None,
                     collide: Callable | None = None) -> DiscreteTransition:
    """Discretise ``p(s' | s, a)`` onto ``states``, folding collisions into s_obs.

    ``density`` is a local model exposing ``pdf(a, displacements)`` and
    ``mean_displacement(a)``; the density of sampled state ``i`` is
    ``pdf(a, states[i] - s)``.  States flagged in ``boundary`` lie on obstacle
    surfaces and always count as colliding targets.  ``index`` is an optional
    KD-tree over ``states``; with a mixture density it restricts evaluation to
    balls that provably contain every state above ``epsilon``.  ``collide``
    maps selected indices to a collision mask and lets callers memoise checks.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("empty state set")
    s = np.asarray(s, dtype=float)
    cand = _candidates(s, a, density, index, epsilon)
    pts = states if cand is None else states[cand]
    dens = np.asarray(density.pdf(a, pts - s), dtype=float) if len(pts) else np.zeros(0)
    if counter is not None:
        counter["density_evals"] = counter.get("density_evals", 0) + 1
    if not np.all(np.isfinite(dens)):
        raise ValueError(f"non-finite density for query s={s}, a={a}")

    local = high_prob_next_states(dens, epsilon)
    selected = local if cand is None else cand[local]
    fallback = False
    if selected.size == 0:
        target = s + np.asarray(density.mean_displacement(a), dtype=float)
        if index is not None:
            d, j = index.query(target, k=1)
            ties = index.query_ball_point(target, d)
            selected = np.array([min(ties) if ties else int(j)])
        else:
            d2 = ((states - target) ** 2).sum(axis=1)
            selected = np.array([int(np.argmin(d2))])
        raw = np.ones(1)
        fallback = True
    else:
        raw = dens[local]

    if collide is None:
        collided = collisions_many(s, states[selected], world)
    else:
        collided = np.array(collide(selected), dtype=bool)
    if boundary is not None:
        collided |= np.asarray(boundary, dtype=bool)[selected]

    probs = np.append(raw, 0.0)
    probs[-1] = raw[collided].sum()
    probs[:-1][collided] = 0.0
    total = raw.sum()
    probs /= total
    support = np.append(selected, OBS_INDEX).astype(np.int64)
    return DiscreteTransition(
        support=support,
        probs=probs,
        collided_fraction=float(probs[-1]),
        fallback=fallback,
        raw_density=raw,
        collided=collided,
    )


class TransitionCache:
    """Transitions keyed by ``(state index, action)`` for one state-set generation.

    Actions are registered per state with sequential ids and matched by
    exact equality.  Reads are lock-free dictionary lookups; registration
    and inserts take a lock.  A duplicated computation for the same key is
    harmless because transitions are deterministic.
    """

    def __init__(self, generation: int = 0):
        self.generation = generation
        self._entries: dict = {}
        self._ids: dict = {}
        self._action_list: dict[int, list] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def clear(self, generation: int) -> None:
        with self._lock:
            self.generation = generation
            self._entries.clear()
            self._ids.clear()
            self._action_list.clear()

    def register(self, s_idx: int, a: np.ndarray) -> int:
        a = np.asarray(a, dtype=float)
        key = (s_idx, a.tobytes())
        aid = self._ids.get(key)
        if aid is not None:
            return aid
        with self._lock:
            aid = self._ids.get(key)
            if aid is None:
                lst = self._action_list.setdefault(s_idx, [])
                aid = len(lst)
                lst.append(a.copy())
                self._ids[key] = aid
            return aid

    def actions(self, s_idx: int) -> list:
        return list(self._action_list.get(s_idx, []))

    def n_actions(self, s_idx: int) -> int:
        return len(self._action_list.get(s_idx, ()))

    def entries(self):
        """All cached transitions of the current generation."""
        return list(self._entries.values())

    def lookup_or_compute(self, s_idx: int, a: np.ndarray, compute: Callable[[], DiscreteTransition],
                          generation: int | None = None) -> DiscreteTransition:
        if generation is not None and generation != self.generation:
            self.clear(generation)
        key = (s_idx, np.asarray(a, dtype=float).tobytes())
        entry = self._entries.get(key)
        if entry is not None:
            self.hits += 1
            return entry
        self.misses += 1
        self.register(s_idx, a)
        entry = compute()
        self._entries[key] = entry
        return entry

    def __len__(self):
        return len(self._entries)
