"""Ground-truth simulators for the two benchmark domains, dataset generation
and Monte Carlo policy evaluation."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .domain import ActionSpace, Dataset, RewardSpec, WorldMap
from .planner import Trajectory, execute_policy

TWO_PI = 2.0 * math.pi


def _rotate(v: np.ndarray, theta) -> np.ndarray:
    """Rotate rows of ``v`` (n, 2) by angles ``theta`` (scalar or (n,))."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


@dataclass(frozen=True)
class ToyDomain:
    """``s' = s + R(z) rho`` with ``rho`` drawn from a fixed two-mode mixture.

    Actions are ``[z, dt]`` with heading ``z`` in ``[0, 2 pi)`` and ``dt``
    fixed at 1.
    """

    weights: tuple = (0.6, 0.4)
    means: tuple = ((5.0, 5.0), (5.0, -5.0))
    variance: float = 2.0
    name: str = "toy"

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace((0.0,), (TWO_PI,), 1.0, 1.0, periodic=(0,))

    def sample_displacements(self, actions: np.ndarray, rng: np.random.Generator,
                             mode=None) -> np.ndarray:
        """Displacements for each row of ``actions``.

        ``mode`` forces the mixture component (used by tests); otherwise it is
        drawn by weight.
        """
        actions = np.atleast_2d(actions)
        n = actions.shape[0]
        if mode is None:
            mode = (rng.random(n) >= self.weights[0]).astype(int)
        else:
            mode = np.broadcast_to(np.asarray(mode, dtype=int), (n,))
        rho = np.asarray(self.means)[mode] + math.sqrt(self.variance) * rng.standard_normal((n, 2))
        return _rotate(rho, actions[:, 0])

    def step(self, s, a, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(s, dtype=float) + self.sample_displacements(np.asarray(a)[None, :], rng)[0]


@dataclass(frozen=True)
class PushDomain:
    """Stochastic quasi-static push of a cylinder.

    Action ``[z, x, dt]``: push heading, contact offset and duration.  The
    nominal displacement ``v dt (cos z, sin z)`` with ``v = v0 (1 - 0.5|x|)``
    slips with probability ``0.15 + 0.25|x|``; a slip turns it by
    ``+-slip_angle`` and halves it.  Gaussian jitter with standard deviation
    ``0.05 |delta|`` is added last.
    """

    v0: float = 4.0
    slip_base: float = 0.15
    slip_gain: float = 0.25
    slip_angle: float = math.pi / 6
    slip_scale: float = 0.5
    jitter: float = 0.05
    t_min: float = 0.1
    t_max: float = 3.0
    object_radius: float = 1.0
    name: str = "push"

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace((0.0, -1.0), (TWO_PI, 1.0), self.t_min, self.t_max, periodic=(0,))

    def slip_probability(self, x) -> np.ndarray:
        return self.slip_base + self.slip_gain * np.abs(x)

    def sample_displacements(self, actions: np.ndarray, rng: np.random.Generator,
                             slip=None) -> np.ndarray:
        actions = np.atleast_2d(actions)
        n = actions.shape[0]
        z, x, dt = actions[:, 0], actions[:, 1], actions[:, 2]
        v = self.v0 * (1.0 - 0.5 * np.abs(x))
        delta = (v * dt)[:, None] * np.stack([np.cos(z), np.sin(z)], axis=1)
        u_slip = rng.random(n)
        u_sign = rng.random(n)
        if slip is None:
            slipped = u_slip < self.slip_probability(x)
        else:
            slipped = np.broadcast_to(np.asarray(slip, dtype=bool), (n,))
        sign = np.where(u_sign < 0.5, 1.0, -1.0)
        turned = _rotate(delta, sign * self.slip_angle) * self.slip_scale
        delta = np.where(slipped[:, None], turned, delta)
        sd = self.jitter * np.linalg.norm(delta, axis=1)
        return delta + sd[:, None] * rng.standard_normal((n, 2))

    def step(self, s, a, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(s, dtype=float) + self.sample_displacements(np.asarray(a)[None, :], rng)[0]


DOMAINS = {"toy": ToyDomain, "push": PushDomain}


def make_domain(name: str):
    try:
        return DOMAINS[name]()
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; expected one of {sorted(DOMAINS)}") from None


def toy_step(s, a, rng: np.random.Generator) -> np.ndarray:
    return ToyDomain().step(s, a, rng)


def push_step(s, a, rng: np.random.Generator) -> np.ndarray:
    return PushDomain().step(s, a, rng)


def generate_dataset(domain, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` uniform actions with one simulated displacement each."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    actions = domain.action_space.uniform(rng, n)
    deltas = domain.sample_displacements(actions, rng)
    return Dataset(actions, deltas, meta={"domain": domain.name})


def delta_max(dataset: Dataset, q: float = 99.0) -> float:
    """High percentile of single-action displacement length."""
    return float(np.percentile(np.linalg.norm(dataset.deltas, axis=1), q))


def evaluate_policy(policy, domain, world: WorldMap, spec: RewardSpec, n_rollouts: int = 500,
                    max_steps: int = 500, seed: int = 0, start=None, threads: int = 1) -> dict:
    """Monte Carlo rollouts against the true simulator.

    Rollout ``i`` uses its own stream seeded with ``seed + i``.  Returns a
    summary with the trajectories under ``"trajectories"``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    start = world.start if start is None else start
    if start is None:
        raise ValueError("no start state given")

    def run(i: int) -> Trajectory:
        rng = np.random.default_rng(seed + i)
        return execute_policy(policy, world, domain.step, spec, start, rng, max_steps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            trajs = list(ex.map(run, range(n_rollouts)))
    else:
        trajs = [run(i) for i in range(n_rollouts)]
    return summarize(trajs)


def summarize(trajs: list) -> dict:
    n = len(trajs)
    outcomes = [t.outcome for t in trajs]
    returns = np.array([t.discounted_return for t in trajs])
    return {
        "n_rollouts": n,
        "mean_reward": float(returns.mean()),
        "std_reward": float(returns.std()),
        "success_rate": outcomes.count("success") / n,
        "collision_rate": outcomes.count("collision") / n,
        "timeout_rate": outcomes.count("timeout") / n,
        "mean_steps": float(np.mean([t.steps for t in trajs])),
        "trajectories": trajs,
    }


def write_trajectories(path, trajs: list) -> None:
    """One row per step: ``rollout, step, s..., a..., reward, outcome``.

    Step 0 of each rollout holds the start state with empty action/reward.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d_s = len(trajs[0].states[0]) if trajs else 2
        d_a = len(next((t.actions[0] for t in trajs if t.actions), [])) if trajs else 0
        w.writerow(["rollout", "step"] + [f"s_{i + 1}" for i in range(d_s)]
                   + [f"a_{i + 1}" for i in range(d_a)] + ["reward", "outcome"])
        for r, t in enumerate(trajs):
            for k, s in enumerate(t.states):
                if k == 0:
                    act = [""] * d_a
                    rew = ""
                else:
                    act = [repr(float(v)) for v in t.actions[k - 1]]
                    rew = repr(float(t.rewards[k - 1]))
                w.writerow([r, k, *(repr(float(v)) for v in s), *act, rew, t.outcome])
