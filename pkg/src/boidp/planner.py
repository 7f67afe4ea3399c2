"""RTDP over sampled states with GP-driven Bellman maximisation.

The plan works on a discrete MDP whose states are the sampled set plus the
absorbing collision state (support index ``-1``).  Goal states and the
collision state are terminal with value 0; their payoffs arrive through the
transition reward ``R(s' | s, a)``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .acquisition import (AcquisitionContext, Evaluation, default_kernel, grid_pool, halton_pool,
                          select_batch, select_exhaustive, select_random, select_sequential)
from .domain import ActionSpace, RewardSpec, WorldMap, collisions_many, exists_collision
from .gp import GpPosterior, KernelSpec
from .sampling import SampledStateSet, sample_states
from .transition import DEFAULT_EPSILON, DiscreteTransition, TransitionCache, transition_model

logger = logging.getLogger(__name__)

SELECTORS = ("batch", "sequential", "random", "exhaustive")
QUIET_TRIALS = 5
DEPTH_CAP = 200


@dataclass(frozen=True)
class SelectorConfig:
    """How the Bellman maximisation searches the action space.

    ``batch`` runs ``T`` rounds of ``M`` actions.  ``sequential`` and
    ``random`` spend the same ``T * M`` evaluations; ``exhaustive`` scores
    the whole pool.
    """

    kind: str = "batch"
    T: int = 10
    M: int = 8
    lam: float = 1.0
    pool_size: int = 512
    pool: str = "halton"  # or "grid"
    refit_every: int = 5

    def __post_init__(self):
        if self.kind not in SELECTORS:
            raise ValueError(f"unknown selector {self.kind!r}; expected one of {SELECTORS}")
        if self.T < 1 or self.M < 1 or self.pool_size < 1:
            raise ValueError("T, M and pool_size must be >= 1")
        if self.pool not in ("halton", "grid"):
            raise ValueError("pool must be 'halton' or 'grid'")

    @property
    def budget(self) -> int:
        return self.T * self.M


@dataclass
class OptimisticEntry:
    best_action: np.ndarray
    best_q: float
    support: np.ndarray
    values: np.ndarray


@dataclass
class PlanStats:
    trials: int = 0
    backups: int = 0
    optimistic_hits: int = 0
    q_evaluations: int = 0
    selector_evaluations: int = 0
    clamped_backups: int = 0
    violations_above_hu: int = 0
    violations_increase: int = 0
    fallback_transitions: int = 0
    fallback_actions: int = 0
    visited: set = field(default_factory=set)
    distinct_actions: dict = field(default_factory=dict)
    v0_per_round: list = field(default_factory=list)
    states_per_round: list = field(default_factory=list)
    trials_per_round: list = field(default_factory=list)

    def note_action(self, s: int, a: np.ndarray) -> None:
        self.distinct_actions.setdefault(s, set()).add(np.asarray(a, dtype=float).tobytes())

    def actions_per_visited_state(self) -> float:
        if not self.visited:
            return 0.0
        return float(np.mean([len(self.distinct_actions.get(s, ())) for s in self.visited]))


class PlanState:
    """Value/policy tables over a discrete state set.

    Parameters
    ----------
    terminal:
        Boolean mask of absorbing goal states.
    transition:
        ``(s_idx, action) -> DiscreteTransition``.
    pool:
        ``s_idx -> (n, d) array`` of candidate actions for that state.
    """

    def __init__(self, h_u, terminal, transition: Callable, pool: Callable, spec: RewardSpec,
                 selector: SelectorConfig, boundary=None, kernel: KernelSpec | None = None,
                 q_floor: float | None = None, threads: int = 1, seed: int = 0, trace: bool = False):
        h_u = np.asarray(h_u, dtype=float)
        n = h_u.shape[0]
        self.n_states = n
        self.terminal = np.asarray(terminal, dtype=bool)
        self.boundary = np.zeros(n, dtype=bool) if boundary is None else np.asarray(boundary, dtype=bool)
        self.spec = spec
        self.selector = selector
        self.transition = transition
        self.pool = pool
        self.kernel = kernel
        self.seed = seed
        self.threads = threads
        self.q_floor = q_floor if q_floor is not None else min(
            spec.obstacle_cost, spec.action_cost / (1.0 - spec.gamma))
        # One extra slot at the end stands for the collision state, so support
        # index -1 addresses it directly.
        self.h_u = np.append(h_u, 0.0)
        self.R = np.full(n + 1, spec.action_cost, dtype=float)
        self.R[:n][self.terminal] = spec.goal_reward
        self.R[n] = spec.obstacle_cost
        self.V = self.h_u.copy()
        self.V[:n][self.terminal] = 0.0
        self.V[n] = 0.0
        self.policy: dict[int, np.ndarray] = {}
        self.optimistic: dict[int, OptimisticEntry] = {}
        self.history: dict[int, list] = {}
        self.record_history = False
        self.stats = PlanStats()
        self.trace: list | None = [] if trace else None
        self._executor = ThreadPoolExecutor(threads) if threads > 1 else None
        self._blocks: dict = {}

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    @property
    def values(self) -> np.ndarray:
        return self.V[:-1]

    def is_terminal(self, s: int) -> bool:
        return bool(self.terminal[s])


def q_from_transition(plan: PlanState, tr: DiscreteTransition, dt: float) -> float:
    sup = tr.support
    return float(tr.probs @ (plan.R[sup] + plan.spec.gamma ** dt * plan.V[sup]))


def q_value(plan: PlanState, s: int, a) -> float:
    """``sum_s' P(s'|s,a) (R(s'|s,a) + gamma^dt V(s'))``."""
    a = np.asarray(a, dtype=float)
    plan.stats.q_evaluations += 1
    return q_from_transition(plan, plan.transition(s, a), float(a[-1]))


def q_values(plan: PlanState, s: int, actions, block: bool = False) -> np.ndarray:
    """Q-values of several actions at ``s`` in one vectorised pass.

    With ``block=True`` the concatenated transitions are memoised for this
    exact action list, which pays off for pools that are re-scored often.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    plan.stats.q_evaluations += actions.shape[0]
    key = (s, actions.tobytes()) if block else None
    packed = plan._blocks.get(key) if block else None
    if packed is None:
        if plan._executor is not None and actions.shape[0] > 1:
            trs = list(plan._executor.map(lambda a: plan.transition(s, a), actions))
        else:
            trs = [plan.transition(s, a) for a in actions]
        lens = np.array([len(t.support) for t in trs])
        seg = np.repeat(np.arange(len(trs)), lens)
        packed = (np.concatenate([t.support for t in trs]), np.concatenate([t.probs for t in trs]),
                  seg, plan.spec.gamma ** actions[:, -1][seg])
        if block:
            plan._blocks[key] = packed
    sup, probs, seg, disc = packed
    vals = probs * (plan.R[sup] + disc * plan.V[sup])
    return np.bincount(seg, weights=vals, minlength=actions.shape[0])


def _snapshot_valid(plan: PlanState, entry: OptimisticEntry) -> bool:
    return np.array_equal(plan.V[entry.support], entry.values)


def _posterior(plan: PlanState, s: int, dim: int) -> GpPosterior:
    # Fixed affine scaling of Q-values from the known value range.
    top = float(plan.h_u[s])
    lo = min(plan.q_floor, top - 1.0)
    kernel = plan.kernel if plan.kernel is not None else KernelSpec(1.0, (1.0,) * dim, 1e-4)
    return GpPosterior(kernel, shift=0.5 * (top + lo), scale=0.5 * (top - lo))


def bellman_backup(plan: PlanState, s: int, rng: np.random.Generator):
    """Maximise Q at ``s``, update ``V(s)`` and ``pi(s)``; returns ``(action, value)``.

    When the cached best action's successors all kept their values, the
    cached result is returned without running the selector.  The stored
    value never rises: ``V(s) <- min(V(s), max Q)`` where the max runs over
    the evaluated actions and the incumbent policy action.
    """
    if plan.is_terminal(s):
        raise ValueError(f"backup requested at terminal state {s}")
    stats = plan.stats
    stats.backups += 1
    stats.visited.add(s)
    entry = plan.optimistic.get(s)
    if entry is not None and _snapshot_valid(plan, entry):
        stats.optimistic_hits += 1
        _set_value(plan, s, entry.best_q)
        return entry.best_action, float(plan.V[s])

    cfg = plan.selector
    pool = np.atleast_2d(plan.pool(s))

    def evaluate_batch(actions):
        vals = q_values(plan, s, actions, block=cfg.kind == "exhaustive")
        stats.selector_evaluations += len(actions)
        seen = stats.distinct_actions.get(s)
        if cfg.kind != "exhaustive" or seen is None or len(seen) < len(actions):
            for a in actions:
                stats.note_action(s, a)
        return vals.tolist()

    incumbent = plan.policy.get(s)
    in_pool = incumbent is not None and bool(np.any(np.all(pool == incumbent, axis=1)))
    evaluated: list[Evaluation] = []
    if incumbent is not None and not (cfg.kind == "exhaustive" and in_pool):
        q_inc = q_value(plan, s, incumbent)
        evaluated.append(Evaluation(incumbent, q_inc, math.nan, -1))

    ctx = AcquisitionContext(_posterior(plan, s, pool.shape[1]), float(plan.h_u[s]), pool, cfg.lam,
                             refit_every=cfg.refit_every, seed=plan.seed + s)
    if cfg.kind == "exhaustive":
        _, _, hist = select_exhaustive(ctx, lambda batch: evaluate_batch(pool))
    else:
        if incumbent is not None:
            ctx.available &= ~np.all(pool == incumbent, axis=1)
            if cfg.kind != "random":
                ctx.observe(incumbent, evaluated[0].value)
        if cfg.kind == "batch":
            _, _, hist = select_batch(ctx, evaluate_batch, cfg.T, min(cfg.M, int(ctx.available.sum())))
        elif cfg.kind == "sequential":
            _, _, hist = select_sequential(ctx, lambda a: evaluate_batch([a])[0], cfg.budget)
        else:
            _, _, hist = select_random(ctx, None, cfg.budget, rng, evaluate_batch=evaluate_batch)
    evaluated.extend(hist)
    if plan.record_history:
        plan.history.setdefault(s, []).extend(hist)

    best = max(range(len(evaluated)), key=lambda i: (evaluated[i].value, -i))
    a_best = np.asarray(evaluated[best].action, dtype=float)
    q_best = float(evaluated[best].value)
    tr = plan.transition(s, a_best)
    plan.optimistic[s] = OptimisticEntry(a_best, q_best, tr.support.copy(), plan.V[tr.support].copy())
    plan.policy[s] = a_best
    _set_value(plan, s, q_best)
    return a_best, float(plan.V[s])


def _set_value(plan: PlanState, s: int, q: float) -> None:
    old = float(plan.V[s])
    if q > old:
        plan.stats.clamped_backups += 1
    new = min(old, q)
    if new > plan.h_u[s] + 1e-6:
        plan.stats.violations_above_hu += 1
    if new > old:
        plan.stats.violations_increase += 1
    plan.V[s] = new
    if plan.trace is not None:
        plan.trace.append((s, old, new, float(plan.h_u[s])))


def trial_recurse(plan: PlanState, s0: int, rng: np.random.Generator, depth_cap: int = DEPTH_CAP) -> float:
    """One RTDP trial from ``s0``; returns the largest value change.

    Walks forward with pre-backups, sampling successors from the greedy
    transition, until a terminal or collision, a state already on the
    current path, or the depth cap; then backs up the path in reverse.
    """
    plan.stats.trials += 1
    before = {}
    stack: list[int] = []
    on_stack: set[int] = set()
    s = s0
    while not plan.is_terminal(s) and s not in on_stack and len(stack) < depth_cap:
        before.setdefault(s, float(plan.V[s]))
        a, _ = bellman_backup(plan, s, rng)
        stack.append(s)
        on_stack.add(s)
        nxt = plan.transition(s, a).sample(rng)
        if nxt < 0:
            break
        s = nxt
    for s in reversed(stack):
        bellman_backup(plan, s, rng)
    return max((abs(plan.V[s] - v) for s, v in before.items()), default=0.0)


def rtdp(plan: PlanState, s0: int, rng: np.random.Generator, max_trials: int = 1000,
         tol: float = 1e-3, depth_cap: int = DEPTH_CAP):
    """Trials from ``s0`` until ``QUIET_TRIALS`` consecutive trials change no
    value by ``tol`` or more, or ``max_trials`` is reached.  ``tol=inf``
    runs exactly one trial."""
    quiet = 0
    n = 0
    if plan.is_terminal(s0):
        return plan.policy, plan.values, plan.stats
    while n < max_trials:
        delta = trial_recurse(plan, s0, rng, depth_cap)
        n += 1
        if math.isinf(tol):
            break
        quiet = quiet + 1 if delta < tol else 0
        if quiet >= QUIET_TRIALS:
            break
    plan.stats.trials_per_round.append(n)
    return plan.policy, plan.values, plan.stats


def compute_h_u(states: np.ndarray, goal: np.ndarray, spec: RewardSpec, delta_max: float,
                t_min: float, t_max: float) -> np.ndarray:
    """Optimistic value bound from the straight-line distance to the goal.

    A state ``l`` away from the nearest goal state needs at least
    ``n = ceil(l / delta_max)`` actions.  Discounting the ``n - 1`` step
    costs as heavily as possible and the goal reward as lightly as possible
    gives the bound; it is never below the value of crashing at once or of
    paying the action cost forever.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    goal = np.asarray(goal, dtype=bool)
    if not goal.any():
        raise ValueError("no goal state in the sampled set")
    if not delta_max > 0:
        raise ValueError("delta_max must be positive")
    gs = states[goal]
    dist = np.full(states.shape[0], np.inf)
    for start in range(0, gs.shape[0], 256):
        chunk = gs[start:start + 256]
        d = np.sqrt(((states[:, None, :] - chunk[None, :, :]) ** 2).sum(-1)).min(1)
        dist = np.minimum(dist, d)
    n = np.maximum(1, np.ceil(dist / delta_max - 1e-12)).astype(int)
    g = spec.gamma
    costs = spec.action_cost * (1.0 - g ** ((n - 1) * t_max)) / (1.0 - g ** t_max)
    h = costs + g ** ((n - 1) * t_min) * spec.goal_reward
    floor = max(spec.obstacle_cost, spec.action_cost / (1.0 - g ** t_max))
    h = np.maximum(h, floor)
    h[goal] = spec.goal_reward
    return h


@dataclass
class Problem:
    """Everything needed to plan in a continuous domain."""

    world: WorldMap
    action_space: ActionSpace
    density: object
    spec: RewardSpec
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    delta_max: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    n_action_tries: int = 10
    threads: int = 1
    max_attempts: int = 10**6


def make_pool(problem: Problem, s_idx: int) -> np.ndarray:
    cfg = problem.selector
    if cfg.pool == "grid":
        return grid_pool(problem.action_space, cfg.pool_size)
    return halton_pool(problem.action_space, cfg.pool_size, seed=s_idx)


def build_plan(problem: Problem, states: SampledStateSet, cache: TransitionCache, seed: int = 0,
               trace: bool = False) -> PlanState:
    space = problem.action_space
    X = states.states
    goal = states.goal
    boundary = states.boundary
    h_u = compute_h_u(X, goal, problem.spec, problem.delta_max, space.t_min, space.t_max)
    if cache.generation != states.generation:
        cache.clear(states.generation)
    index = cKDTree(X)
    pools: dict[int, np.ndarray] = {}
    # Per-source collision verdicts (-1 unknown); all actions from a state
    # share most of their candidate targets.
    verdicts: dict[int, np.ndarray] = {}

    def collide_from(s):
        row = verdicts.get(s)
        if row is None:
            row = verdicts[s] = np.full(len(X), -1, dtype=np.int8)

        def collide(idx):
            vals = row[idx]
            todo = vals < 0
            if todo.any():
                # Settle the whole disc reaching the farthest unknown target.
                r = np.sqrt(((X[idx[todo]] - X[s]) ** 2).sum(axis=1).max())
                u = np.asarray(index.query_ball_point(X[s], r * 1.25 + 1e-9), dtype=np.int64)
                u = np.union1d(u[row[u] < 0], idx[todo])
                row[u] = collisions_many(X[s], X[u], problem.world)
                vals = row[idx]
            return vals.astype(bool)
        return collide

    def transition(s, a):
        def compute():
            tr = transition_model(X[s], a, X, problem.density, problem.world, problem.epsilon,
                                  boundary=boundary, index=index, collide=collide_from(s))
            if tr.fallback:
                plan.stats.fallback_transitions += 1
            return tr
        return cache.lookup_or_compute(s, a, compute)

    def pool(s):
        p = pools.get(s)
        if p is None:
            p = pools[s] = make_pool(problem, s)
        return p

    plan = PlanState(h_u, goal, transition, pool, problem.spec, problem.selector, boundary=boundary,
                     kernel=default_kernel(space), threads=problem.threads, seed=seed, trace=trace)
    plan.cache = cache
    plan.states = states
    return plan


def boidp(problem: Problem, start, n_min: int, rng: np.random.Generator, rounds: int = 1,
          tol: float = 1e-2, max_trials: int = 1000, rtdp_tol: float = 1e-3,
          depth_cap: int = DEPTH_CAP, trace: bool = False, record_history: bool = False):
    """Alternate state sampling and RTDP until ``V(s0)`` settles.

    Returns ``(plan, states)``; ``plan.stats.v0_per_round`` holds the
    start value after each round.
    """
    states = SampledStateSet(start, problem.world)
    cache = TransitionCache(states.generation)
    plan = None
    v0_prev = None
    traces = []
    t0 = time.perf_counter()
    for r in range(rounds):
        sample_states(n_min, states, problem.world, problem.density, rng, problem.action_space,
                      problem.n_action_tries, problem.max_attempts)
        prev_stats = plan.stats if plan is not None else None
        if plan is not None:
            plan.close()
        plan = build_plan(problem, states, cache, seed=int(rng.integers(2**31)), trace=trace)
        plan.record_history = record_history
        if prev_stats is not None:
            plan.stats.v0_per_round = prev_stats.v0_per_round
            plan.stats.states_per_round = prev_stats.states_per_round
            plan.stats.trials_per_round = prev_stats.trials_per_round
        rtdp(plan, 0, rng, max_trials, rtdp_tol, depth_cap)
        if trace:
            traces.extend(plan.trace)
        v0 = float(plan.V[0])
        plan.stats.v0_per_round.append(v0)
        plan.stats.states_per_round.append(len(states))
        if v0_prev is not None and abs(v0 - v0_prev) < tol:
            break
        v0_prev = v0
    plan.wall_time = time.perf_counter() - t0
    if trace:
        plan.trace = traces
    return plan, states


def plan_stats(plan: PlanState) -> dict:
    st = plan.stats
    n = plan.n_states
    interior = int((~plan.boundary).sum())
    counts = [len(st.distinct_actions.get(s, ())) for s in sorted(st.visited)]
    hist = np.bincount(counts).tolist() if counts else []
    cache = getattr(plan, "cache", None)
    lookups = (cache.hits + cache.misses) if cache is not None else 0
    return {
        "n_states": n,
        "n_interior": interior,
        "visited_states": len(st.visited),
        "visited_fraction": len(st.visited) / n if n else 0.0,
        "visited_fraction_interior": len(st.visited) / interior if interior else 0.0,
        "trials": st.trials,
        "backups": st.backups,
        "optimistic_hits": st.optimistic_hits,
        "q_evaluations": st.q_evaluations,
        "selector_evaluations": st.selector_evaluations,
        "actions_per_visited_state": st.actions_per_visited_state(),
        "actions_evaluated_histogram": hist,
        "cache_hit_rate": (cache.hits / lookups) if lookups else 0.0,
        "clamped_backups": st.clamped_backups,
        "violations_above_hu": st.violations_above_hu,
        "violations_increase": st.violations_increase,
        "fallback_transitions": st.fallback_transitions,
        "fallback_actions": st.fallback_actions,
        "v0_per_round": st.v0_per_round,
        "v0_round_differences": np.abs(np.diff(st.v0_per_round)).tolist(),
        "states_per_round": st.states_per_round,
        "trials_per_round": st.trials_per_round,
    }


# --------------------------------------------------------------------------- execution

@dataclass
class Trajectory:
    states: list
    actions: list
    rewards: list
    outcome: str
    discounted_return: float

    @property
    def steps(self) -> int:
        return len(self.actions)


class Policy:
    """State-feedback controller: act as the nearest sampled non-boundary state.

    States without a planned action get a greedy one-step choice over 32
    random actions scored with the plan's transition model, memoised per state.
    """

    FALLBACK_POOL = 32

    def __init__(self, states: np.ndarray, boundary: np.ndarray, actions: dict, plan: PlanState | None = None,
                 action_space: ActionSpace | None = None, seed: int = 0):
        self.states = np.asarray(states, dtype=float)
        self.candidates = np.flatnonzero(~np.asarray(boundary, dtype=bool))
        self._tree = cKDTree(self.states[self.candidates])
        self.actions = {int(k): np.asarray(v, dtype=float) for k, v in actions.items()}
        self.plan = plan
        self.action_space = action_space
        self.seed = seed
        self.fallbacks = 0

    @classmethod
    def from_plan(cls, plan: PlanState, states: SampledStateSet, action_space: ActionSpace, seed: int = 0):
        return cls(states.states, states.boundary, plan.policy, plan, action_space, seed)

    def nearest(self, s) -> int:
        _, j = self._tree.query(np.asarray(s, dtype=float))
        return int(self.candidates[int(j)])

    def action_for_index(self, idx: int) -> np.ndarray:
        a = self.actions.get(idx)
        if a is not None:
            return a
        if self.plan is None or self.action_space is None:
            raise KeyError(f"no action for state {idx} and no plan for a fallback")
        logger.debug("policy undefined at state %d; using greedy fallback", idx)
        self.fallbacks += 1
        self.plan.stats.fallback_actions += 1
        rng = np.random.default_rng([self.seed, idx])
        pool = self.action_space.uniform(rng, self.FALLBACK_POOL)
        qs = [q_value(self.plan, idx, a) for a in pool]
        a = pool[int(np.argmax(qs))]
        self.actions[idx] = a
        return a

    def __call__(self, s) -> np.ndarray:
        return self.action_for_index(self.nearest(s))


def execute_policy(policy: Callable, world: WorldMap, step: Callable, spec: RewardSpec, start,
                   rng: np.random.Generator, max_steps: int = 500) -> Trajectory:
    """Roll the true simulator forward under ``policy``.

    Stops on reaching the goal (``success``), leaving free space along the
    straight path (``collision``) or after ``max_steps`` (``timeout``).
    """
    s = np.asarray(start, dtype=float)
    states = [s]
    actions: list = []
    rewards: list = []
    ret = 0.0
    elapsed = 0.0
    if bool(world.in_goal(s)):
        return Trajectory(states, actions, rewards, "success", 0.0)
    outcome = "timeout"
    for _ in range(max_steps):
        a = np.asarray(policy(s), dtype=float)
        s_next = np.asarray(step(s, a, rng), dtype=float)
        if exists_collision(s, a, s_next, world):
            r, outcome = spec.obstacle_cost, "collision"
        elif bool(world.in_goal(s_next)):
            r, outcome = spec.goal_reward, "success"
        else:
            r = spec.action_cost
        ret += spec.gamma ** elapsed * r
        elapsed += float(a[-1])
        actions.append(a)
        rewards.append(r)
        states.append(s_next)
        s = s_next
        if outcome != "timeout":
            break
    return Trajectory(states, actions, rewards, outcome, ret)


def policy_to_json(plan: PlanState, states: SampledStateSet, meta: dict | None = None) -> str:
    """Deterministic serialisation of the planned tables."""
    doc = {
        "schema_version": 1,
        "meta": meta or {},
        "states": states.states.tolist(),
        "boundary": [bool(b) for b in states.boundary],
        "goal": [bool(g) for g in states.goal],
        "policy": {str(k): np.asarray(v).tolist() for k, v in sorted(plan.policy.items())},
        "V": plan.values.tolist(),
        "h_u": plan.h_u[:-1].tolist(),
    }
    return json.dumps(doc, sort_keys=True, indent=1)
