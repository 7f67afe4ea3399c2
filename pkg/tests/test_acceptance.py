"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 7 to 10 share the planning runs of two session fixtures; the whole
file takes roughly an hour on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from boidp.acquisition import AcquisitionContext, batch_objective, batch_objective_increment, greedy_batch
from boidp.experiment import load_config, run_evaluate, run_plan
from boidp.gp import GpPosterior, KernelSpec, gp_fit, gp_predict_many, gp_update, matern52
from boidp.density import select_k_bic
from boidp.planner import PlanState, SelectorConfig, rtdp
from boidp.transition import DiscreteTransition

from conftest import CRITERIA

TOY_SIZES = (1500, 2500, 3500)
PUSH_SIZES = (200, 600, 1000)
SEEDS = (0, 1, 2)


def record(key, ok, detail):
    CRITERIA[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def trace_violations(trace):
    above = sum(new > hu + 1e-6 for _, _, new, hu in trace)
    rises = sum(new > old for _, old, new, _ in trace)
    return above, rises


# ------------------------------------------------------------------ shared runs

def run_grid(cfg, axis_key, arms, sizes):
    """Plan and evaluate every (arm, size, seed) cell, keeping compact rows."""
    rows = []
    t0 = time.perf_counter()
    for n, seed, arm in itertools.product(sizes, SEEDS, arms):
        c = cfg.with_overrides(**{axis_key: arm, "sampler__n_states": n})
        res = run_plan(c, seed, threads=1, trace=True)
        summ = run_evaluate(c, res, seed)
        sums, folds = [], []
        for tr in res.plan.cache.entries():
            sums.append(abs(tr.probs.sum() - 1.0))
            raw = tr.raw_density
            folds.append(abs(tr.probs[-1] - raw[tr.collided].sum() / raw.sum()))
        rows.append({
            "arm": arm, "n": n, "seed": seed,
            "success": summ["success_rate"], "reward": summ["mean_reward"],
            "visited": res.stats["visited_fraction"], "actions": res.stats["actions_per_visited_state"],
            "violations": trace_violations(res.plan.trace),
            "norm_err": max(sums, default=0.0), "fold_err": max(folds, default=0.0), "n_transitions": len(sums),
        })
    return rows, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_runs():
    return run_grid(load_config("toy.yaml"), "density__force_k", (1, 2), TOY_SIZES)


@pytest.fixture(scope="session")
def push_runs():
    return run_grid(load_config("push_lite.yaml"), "selector__kind", ("batch", "random"), PUSH_SIZES)


MICRO_TRACES = []


# ------------------------------------------------------------------ criteria

def test_criterion_01_gp_matches_dense_solve():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        k = KernelSpec(rng.uniform(0.5, 2.0), tuple(rng.uniform(0.3, 1.5, 3)), 1e-4)
        X = rng.uniform(0, 2, size=(200, 3))
        y = np.sin(3 * X).sum(1) + 0.1 * rng.standard_normal(200)
        A = rng.uniform(0, 2, size=(50, 3))
        g = GpPosterior(k)
        for a, v in zip(X, y):
            g = gp_update(g, a, v)
        mu, sd = gp_predict_many(g, A)
        K = matern52(k, X, X) + k.noise_variance * np.eye(200)
        Ks = matern52(k, X, A)
        mu0 = Ks.T @ np.linalg.solve(K, y)
        sd0 = np.sqrt(k.signal_variance - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks)))
        worst = max(worst, np.max(np.abs(mu - mu0)) / np.max(np.abs(mu0)),
                    np.max(np.abs(sd - sd0)) / np.max(np.abs(sd0)))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-8 and elapsed < 10.0, f"max relative error {worst:.2e}, {elapsed:.1f} s")


def planner_like_context(rng, n_cand):
    """A selection state scaled the way the planner scales Q-values."""
    k = KernelSpec(1.0, tuple(rng.uniform(0.1, 0.5, 2)), 1e-4)
    top = rng.uniform(-20.0, 100.0)
    shift, scale = 0.5 * (top - 100.0), 0.5 * (top + 100.0)
    X = rng.uniform(0, 1, size=(int(rng.integers(0, 8)), 2))
    y = rng.uniform(-100.0, top, size=len(X))
    post = gp_fit(k, X, y, shift=shift, scale=scale) if len(X) else GpPosterior(k, shift=shift, scale=scale)
    return AcquisitionContext(post, top, rng.uniform(0, 1, size=(n_cand, 2)), lam=1.0, refit_every=0)


def test_criterion_02_increment_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        ctx = planner_like_context(rng, 8)
        B = rng.uniform(0, 1, size=(int(rng.integers(0, 7)), 2))
        a = rng.uniform(0, 1, size=2)
        direct = batch_objective(ctx, np.vstack([B, a])) - batch_objective(ctx, B)
        worst = max(worst, abs(batch_objective_increment(ctx, B, a) - direct))
    record(2, worst <= 1e-9, f"max |increment - direct| {worst:.2e} over 1000 pairs")


def test_criterion_03_greedy_quality():
    rng = np.random.default_rng(3)
    violations = 0
    worst = math.inf
    for _ in range(100):
        ctx = planner_like_context(rng, 8)
        got = batch_objective(ctx, ctx.candidates[greedy_batch(ctx, 3)])
        opt = max(batch_objective(ctx, ctx.candidates[list(c)]) for c in itertools.combinations(range(8), 3))
        violations += got < (1 - 1 / math.e) * opt - 1e-12
        worst = min(worst, got / opt if opt > 0 else math.inf)
    record(3, violations == 0, f"{violations} violations, worst greedy/optimum ratio {worst:.4f}")


def test_criterion_04_transition_normalisation(toy_runs):
    rows, _ = toy_runs
    norm = max(r["norm_err"] for r in rows)
    fold = max(r["fold_err"] for r in rows)
    n = sum(r["n_transitions"] for r in rows)
    record(4, norm <= 1e-12 and fold <= 1e-12,
           f"{n} transitions over {len(rows)} toy plans; max |sum-1| {norm:.1e}, max fold error {fold:.1e}")


def test_criterion_05_density_recovery():
    t0 = time.perf_counter()
    hits = 0
    weights_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lab = (rng.random(2000) >= 0.6).astype(int)
        X = np.array([[5.0, 5.0], [5.0, -5.0]])[lab] + math.sqrt(2.0) * rng.standard_normal((2000, 2))
        g = select_k_bic(X, 4, seed=seed)
        if g.k == 2:
            hits += 1
            w = g.weights[np.argsort(-g.means[:, 1])]
            weights_ok += bool(np.all(np.abs(w - [0.6, 0.4]) <= 0.05))
    elapsed = time.perf_counter() - t0
    record(5, hits >= 95 and weights_ok == hits and elapsed < 60.0,
           f"K=2 chosen {hits}/100, weights within 0.05 in {weights_ok}/{hits}, {elapsed:.1f} s")


MICRO = {
    0: [(1.0, [(1, 0.8), (-1, 0.2)]), (2.0, [(2, 1.0)]), (1.0, [(0, 1.0)]), (1.0, [(5, 1.0)])],
    1: [(1.0, [(3, 0.7), (0, 0.3)]), (1.0, [(2, 0.5), (-1, 0.5)])],
    2: [(1.0, [(3, 0.9), (2, 0.1)]), (3.0, [(3, 1.0)]), (1.0, [(1, 0.6), (5, 0.4)])],
    5: [(1.0, [(3, 0.5), (-1, 0.5)]), (2.0, [(2, 1.0)])],
}
MICRO_TERMINAL = [False, False, False, True, False, False]


def test_criterion_06_micro_mdp_oracle():
    gamma, R = 0.99, np.array([-1.0, -1.0, -1.0, 100.0, -1.0, -1.0, -10.0])
    V = np.zeros(7)
    for _ in range(100000):
        new = V.copy()
        for s, acts in MICRO.items():
            new[s] = max(sum(p * (R[j] + gamma ** dt * V[j]) for j, p in outs) for dt, outs in acts)
        done = np.max(np.abs(new - V)) < 1e-14
        V = new
        if done:
            break
    pools = {s: np.array([[float(i), dt] for i, (dt, _) in enumerate(acts)]) for s, acts in MICRO.items()}

    def transition(s, a):
        dt, outs = MICRO[s][int(a[0])]
        return DiscreteTransition(np.array([o[0] for o in outs]), np.array([o[1] for o in outs], dtype=float))

    from boidp.domain import RewardSpec
    plan = PlanState(np.full(6, 100.0), MICRO_TERMINAL, transition, lambda s: pools[s], RewardSpec(),
                     SelectorConfig(kind="exhaustive"), kernel=KernelSpec(1.0, (1.0, 1.0)), trace=True)
    rtdp(plan, 0, np.random.default_rng(6), max_trials=50, tol=1e-10)
    MICRO_TRACES.append(plan.trace)
    err = max(abs(plan.V[s] - V[s]) for s in plan.stats.visited)
    record(6, err <= 1e-6 and plan.stats.trials <= 50,
           f"max |V - V*| {err:.1e} on {len(plan.stats.visited)} visited states after {plan.stats.trials} trials")


def print_cells(rows):
    for r in rows:
        print(f"  arm={r['arm']} n={r['n']} seed={r['seed']} success={r['success']:.3f} "
              f"reward={r['reward']:.2f} visited={r['visited']:.3f} actions={r['actions']:.1f}")


def mean_by(rows, key, arm, n):
    return float(np.mean([r[key] for r in rows if r["arm"] == arm and r["n"] == n]))


def test_criterion_07_two_modes_beat_one(toy_runs):
    rows, elapsed = toy_runs
    print_cells(rows)
    parts, ok = [], elapsed < 30 * 60
    for n in TOY_SIZES:
        k1, k2 = mean_by(rows, "success", 1, n), mean_by(rows, "success", 2, n)
        ok &= k2 > k1
        parts.append(f"N={n}: K1 {k1:.3f} vs K2 {k2:.3f}")
    record(7, ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min")


def test_criterion_08_batch_selection_vs_random(push_runs):
    rows, elapsed = push_runs
    print_cells(rows)
    wins, fewer = 0, 0
    for n, seed in itertools.product(PUSH_SIZES, SEEDS):
        cell = {r["arm"]: r for r in rows if r["n"] == n and r["seed"] == seed}
        wins += cell["batch"]["reward"] >= cell["random"]["reward"]
        fewer += cell["batch"]["actions"] <= cell["random"]["actions"]
    ok = wins >= 7 and fewer == 9 and elapsed < 45 * 60
    record(8, ok, f"reward >= random in {wins}/9 cells, fewer distinct actions in {fewer}/9, "
                  f"{elapsed / 60:.1f} min")


def test_criterion_09_relevance_focusing(toy_runs, push_runs):
    worst, parts = 0.0, []
    for name, (rows, _), n in (("toy", toy_runs, TOY_SIZES[-1]), ("push", push_runs, PUSH_SIZES[-1])):
        fr = [r["visited"] for r in rows if r["n"] == n]
        worst = max(worst, max(fr))
        parts.append(f"{name} N={n}: visited {min(fr):.3f}..{max(fr):.3f}")
    record(9, worst <= 0.30, "; ".join(parts))


def test_criterion_10_monotone_values(toy_runs, push_runs):
    above = rises = 0
    for trace in MICRO_TRACES:
        a, r = trace_violations(trace)
        above, rises = above + a, rises + r
    runs = toy_runs[0] + push_runs[0]
    for r in runs:
        above, rises = above + r["violations"][0], rises + r["violations"][1]
    record(10, above == 0 and rises == 0 and MICRO_TRACES,
           f"{above} values above h_u, {rises} increases over {len(runs) + len(MICRO_TRACES)} plans")


def test_push_actions_per_state_bound(push_runs):
    rows, _ = push_runs
    worst = max(r["actions"] for r in rows)
    assert worst <= 300, f"{worst:.1f} distinct actions per visited state"
