"""Action selection for the Bellman maximisation.

Selectors search a finite candidate pool and call back into the planner to
evaluate Q-values.  Each returns ``(best_action, best_value, history)`` where
``history`` is a list of :class:`Evaluation` records.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .domain import ActionSpace
from .gp import GpPosterior, KernelSpec, gp_predict_many, gp_update, refit_hyperparameters

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-9
JITTER = 1e-9
# Schur complements within this many jitters of zero count as duplicates.
SINGULAR_FACTOR = 10.0
REFIT_EVERY = 5


@dataclass
class Evaluation:
    action: np.ndarray
    value: float
    acquisition: float
    round: int


@dataclass
class AcquisitionContext:
    """Mutable selection state for one state's maximisation.

    ``available`` masks pool entries that may still be proposed; evaluated
    candidates are switched off so no action is tried twice.
    """

    posterior: GpPosterior
    h_u: float
    candidates: np.ndarray
    lam: float = 1.0
    available: np.ndarray = None
    refit_every: int = REFIT_EVERY
    seed: int = 0
    _since_refit: int = 0

    def __post_init__(self):
        self.candidates = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        if self.candidates.shape[0] == 0:
            raise ValueError("candidate pool is empty")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.available is None:
            self.available = np.ones(self.candidates.shape[0], dtype=bool)
        self._check_bound()

    def _check_bound(self):
        if self.posterior.n and self.h_u < self.posterior.y.max() - 1e-6:
            logger.debug("h_u %.6g below observed max %.6g; lifted", self.h_u, self.posterior.y.max())
            self.h_u = float(self.posterior.y.max())

    def observe(self, a, y: float) -> None:
        self.posterior = gp_update(self.posterior, a, y)
        self._since_refit += 1
        if self.refit_every and self._since_refit >= self.refit_every:
            self.posterior = refit_hyperparameters(self.posterior, seed=self.seed)
            self._since_refit = 0
        self._check_bound()


def default_kernel(space: ActionSpace, noise: float = 1e-4) -> KernelSpec:
    """Unit signal variance, lengthscales at 20% of each action range."""
    span = np.where(space.span > 0, space.span, 1.0)
    return KernelSpec(1.0, tuple(0.2 * span), noise)


def est_values(ctx: AcquisitionContext, A) -> np.ndarray:
    mu, sd = gp_predict_many(ctx.posterior, A)
    return (ctx.h_u - mu) / np.maximum(sd, SIGMA_FLOOR)


def est_acquisition(ctx: AcquisitionContext, a) -> float:
    """``(h_u - mu(a)) / sigma(a)``; smaller is better."""
    return float(est_values(ctx, np.asarray(a, dtype=float).reshape(1, -1))[0])


def _check_value(a, y) -> float:
    y = float(y)
    if not math.isfinite(y):
        raise ValueError(f"evaluation returned non-finite value {y} for action {a}")
    return y


def _best(history: Sequence[Evaluation]):
    i = int(np.argmax([h.value for h in history]))
    return history[i].action, history[i].value, list(history)


def select_sequential(ctx: AcquisitionContext, evaluate: Callable, T: int):
    """One EST-minimising evaluation per iteration, ``T`` iterations."""
    if T < 1:
        raise ValueError("T must be >= 1")
    history = []
    for t in range(T):
        idx = np.flatnonzero(ctx.available)
        if idx.size == 0:
            break
        g = est_values(ctx, ctx.candidates[idx])
        j = int(idx[np.argmin(g)])
        a = ctx.candidates[j]
        y = _check_value(a, evaluate(a))
        ctx.available[j] = False
        history.append(Evaluation(a, y, float(g.min()), t))
        ctx.observe(a, y)
    return _best(history)


def _log_det(K: np.ndarray) -> float:
    if K.shape[0] == 0:
        return 0.0
    sign, val = np.linalg.slogdet(K)
    return float(val) if sign > 0 else -math.inf


def batch_objective(ctx: AcquisitionContext, B) -> float:
    """``log det(K_B + jitter I) - lam * sum G`` computed densely."""
    B = np.atleast_2d(np.asarray(B, dtype=float)).reshape(-1, ctx.candidates.shape[1])
    if B.shape[0] == 0:
        return 0.0
    K = ctx.posterior.target_kernel(B, B) + JITTER * np.eye(B.shape[0])
    return _log_det(K) - ctx.lam * float(est_values(ctx, B).sum())


def batch_objective_increment(ctx: AcquisitionContext, B, a) -> float:
    """``F(B + {a}) - F(B)`` through the Schur complement of ``K_B``.

    Returns ``-inf`` when ``a`` is numerically a duplicate of the batch.
    """
    a = np.asarray(a, dtype=float).reshape(1, -1)
    B = np.asarray(B, dtype=float).reshape(-1, a.shape[1])
    k_aa = float(ctx.posterior.target_kernel(a, a)[0, 0]) + JITTER
    if B.shape[0]:
        K_B = ctx.posterior.target_kernel(B, B) + JITTER * np.eye(B.shape[0])
        k_Ba = ctx.posterior.target_kernel(B, a)[:, 0]
        L = np.linalg.cholesky(K_B)
        v = np.linalg.solve(L, k_Ba)
        schur = k_aa - float(v @ v)
    else:
        schur = k_aa
    if schur <= SINGULAR_FACTOR * JITTER:
        return -math.inf
    return math.log(schur) - ctx.lam * est_acquisition(ctx, a[0])


def greedy_batch(ctx: AcquisitionContext, M: int, pool_idx: np.ndarray | None = None) -> list[int]:
    """Greedily pick up to ``M`` pool indices maximising the batch objective.

    Keeps an incremental Cholesky of ``K_B`` so each step costs one
    triangular update for the whole pool.  Ties go to the lowest index.
    """
    if pool_idx is None:
        pool_idx = np.flatnonzero(ctx.available)
    pool_idx = np.asarray(pool_idx)
    if pool_idx.size == 0:
        return []
    C = ctx.candidates[pool_idx]
    quality = ctx.lam * est_values(ctx, C) if ctx.lam else np.zeros(len(pool_idx))
    schur = np.diag(ctx.posterior.target_kernel(C, C)).copy() + JITTER
    rows = []  # rows of L^{-1} K_{B,C}
    chosen: list[int] = []
    alive = np.ones(len(pool_idx), dtype=bool)
    for _ in range(min(M, len(pool_idx))):
        gain = np.full(len(pool_idx), -np.inf)
        ok = alive & (schur > SINGULAR_FACTOR * JITTER)
        gain[ok] = np.log(schur[ok]) - quality[ok]
        if not np.isfinite(gain.max()):
            break
        j = int(np.argmax(gain))
        chosen.append(j)
        alive[j] = False
        # New row of the factor: (k(c_j, C) - sum_r row_r[j] * row_r) / sqrt(schur_j)
        k_jC = ctx.posterior.target_kernel(C[j:j + 1], C)[0]
        for r in rows:
            k_jC = k_jC - r[j] * r
        row = k_jC / math.sqrt(schur[j])
        rows.append(row)
        schur = schur - row * row
    return [int(pool_idx[j]) for j in chosen]


def select_batch(ctx: AcquisitionContext, evaluate_batch: Callable, T: int, M: int):
    """``T`` rounds, each proposing ``M`` actions and evaluating them together."""
    if T < 1 or M < 1:
        raise ValueError("T and M must be >= 1")
    if M > ctx.candidates.shape[0]:
        raise ValueError("batch size exceeds candidate pool")
    history = []
    for t in range(T):
        picks = greedy_batch(ctx, M)
        if not picks:
            break
        acq = est_values(ctx, ctx.candidates[picks])
        batch = [ctx.candidates[j] for j in picks]
        values = list(evaluate_batch(batch))
        if len(values) != len(batch):
            raise ValueError("evaluate_batch returned the wrong number of values")
        ctx.available[picks] = False
        for a, y, g in zip(batch, values, acq):
            y = _check_value(a, y)
            history.append(Evaluation(a, y, float(g), t))
            ctx.observe(a, y)
    return _best(history)


def select_random(ctx: AcquisitionContext, evaluate: Callable, T: int, rng: np.random.Generator,
                  evaluate_batch: Callable | None = None):
    """``T`` candidates uniformly without replacement."""
    if T < 1:
        raise ValueError("T must be >= 1")
    idx = np.flatnonzero(ctx.available)
    picks = idx[rng.permutation(idx.size)[:T]]
    if picks.size == 0:
        return _best([])
    batch = [ctx.candidates[j] for j in picks]
    values = evaluate_batch(batch) if evaluate_batch else [evaluate(a) for a in batch]
    ctx.available[picks] = False
    history = [Evaluation(a, _check_value(a, y), math.nan, 0) for a, y in zip(batch, values)]
    return _best(history)


def select_exhaustive(ctx: AcquisitionContext, evaluate_batch: Callable):
    """Evaluate every available candidate."""
    idx = np.flatnonzero(ctx.available)
    batch = [ctx.candidates[j] for j in idx]
    values = evaluate_batch(batch)
    ctx.available[idx] = False
    history = [Evaluation(a, _check_value(a, y), math.nan, 0) for a, y in zip(batch, values)]
    return _best(history)


def halton_pool(space: ActionSpace, n: int, seed: int) -> np.ndarray:
    """``n`` scrambled Halton points in the action box."""
    unit = qmc.Halton(d=space.dim, scramble=True, seed=seed).random(n)
    return space.from_unit(unit)


def grid_pool(space: ActionSpace, n: int) -> np.ndarray:
    """``n`` evenly spaced values along the first control dimension.

    Used for single-control spaces such as the toy heading; periodic
    dimensions omit the duplicated end point.
    """
    lo, hi = space.control_low[0], space.control_high[0]
    endpoint = 0 not in space.periodic
    u = np.linspace(lo, hi, n, endpoint=endpoint)
    pool = np.tile(space.low, (n, 1))
    pool[:, 0] = u
    pool[:, -1] = 0.5 * (space.t_min + space.t_max)
    return pool


def write_history(path, per_state: dict) -> None:
    """CSV of ``state, action..., value, acquisition, round`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = None
        for s_idx, hist in sorted(per_state.items()):
            for h in hist:
                if dim is None:
                    dim = len(h.action)
                    w.writerow(["state"] + [f"a_{i + 1}" for i in range(dim)] + ["value", "acquisition", "round"])
                w.writerow([s_idx, *(repr(float(v)) for v in h.action), repr(h.value),
                            repr(h.acquisition), h.round])
