import csv
import math

import numpy as np
import pytest
from scipy.stats import ks_2samp, kstest

from boidp.benchmarks import (
    PushDomain, ToyDomain, delta_max, evaluate_policy, generate_dataset, make_domain, push_step, summarize,
    toy_step, write_trajectories,
)
from boidp.density import select_k_bic
from boidp.domain import Dataset, GoalRegion, RectObstacle, RewardSpec, WorldMap

SPEC = RewardSpec()


def test_toy_forced_mode_without_noise():
    d = ToyDomain(variance=0.0)
    out = d.sample_displacements(np.array([[0.0, 1.0]]), np.random.default_rng(0), mode=0)
    np.testing.assert_allclose(out[0], [5.0, 5.0])


def test_toy_rotation_of_the_mean():
    rng = np.random.default_rng(1)
    X = ToyDomain().sample_displacements(np.tile([math.pi / 2, 1.0], (100_000, 1)), rng)
    se = X.std(0) / math.sqrt(len(X))
    assert np.all(np.abs(X.mean(0) - [-1.0, 5.0]) <= 3 * se)


def test_toy_mode_fractions():
    X = ToyDomain().sample_displacements(np.tile([0.0, 1.0], (100_000, 1)), np.random.default_rng(2))
    first = np.linalg.norm(X - [5, 5], axis=1) < np.linalg.norm(X - [5, -5], axis=1)
    assert abs(first.mean() - 0.6) <= 0.01


def test_step_helpers():
    rng = np.random.default_rng(0)
    assert toy_step([1.0, 1.0], np.array([0.3, 1.0]), rng).shape == (2,)
    assert push_step([1.0, 1.0], np.array([0.3, 0.1, 1.0]), rng).shape == (2,)
    with pytest.raises(ValueError):
        make_domain("cartpole")


def test_push_deterministic_core():
    d = PushDomain(jitter=0.0)
    a = np.array([[0.7, 0.0, 1.5]])
    out = d.sample_displacements(a, np.random.default_rng(0), slip=False)
    np.testing.assert_allclose(out[0], 4.0 * 1.5 * np.array([math.cos(0.7), math.sin(0.7)]), rtol=1e-15)


def test_push_slip_fraction():
    d = PushDomain(jitter=0.0)
    a = np.tile([0.0, 0.8, 1.0], (100_000, 1))
    X = d.sample_displacements(a, np.random.default_rng(3))
    nominal = 4.0 * (1 - 0.4)
    slipped = np.linalg.norm(X, axis=1) < 0.75 * nominal
    assert abs(slipped.mean() - 0.35) <= 0.01


def test_push_displacements_are_multimodal():
    d = PushDomain()
    hits = 0
    for seed in range(100):
        X = d.sample_displacements(np.tile([0.0, 0.3, 2.0], (2000, 1)), np.random.default_rng(seed))
        hits += select_k_bic(X, 3, seed=seed).k >= 2
    assert hits >= 90


def test_dataset_generation(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(ToyDomain(), 0, np.random.default_rng(0))
    ds = generate_dataset(PushDomain(), 100_000, np.random.default_rng(4))
    sp = PushDomain().action_space
    for j in range(sp.dim):
        u = (ds.actions[:, j] - sp.low[j]) / sp.span[j]
        assert kstest(u, "uniform").statistic < 0.01
    small = generate_dataset(ToyDomain(), 500, np.random.default_rng(5))
    small.save(tmp_path / "d.csv")
    back = Dataset.load(tmp_path / "d.csv")
    np.testing.assert_allclose(back.actions, small.actions, rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.deltas, small.deltas, rtol=0, atol=1e-12)
    assert 7.0 < delta_max(small) < 12.0


def test_policy_that_reaches_goal_at_once():
    w = WorldMap([0.0, 0.0], [20.0, 20.0], GoalRegion((10.0, 10.0), 4.0), start=[5.0, 5.0])
    one_mode = ToyDomain(weights=(1.0, 0.0), variance=1e-6)
    summ = evaluate_policy(lambda s: np.array([0.0, 1.0]), one_mode, w, SPEC, n_rollouts=50, seed=0)
    assert summ["success_rate"] == 1.0
    assert summ["mean_reward"] == pytest.approx(100.0)


def test_random_policy_collides_on_cluttered_map():
    obs = tuple(RectObstacle((x, y), (x + 3.0, y + 3.0)) for x in (5.0, 15.0, 25.0) for y in (5.0, 15.0, 25.0))
    w = WorldMap([0.0, 0.0], [35.0, 35.0], GoalRegion((32.0, 32.0), 2.0), obstacles=obs, start=[1.0, 1.0])
    rng = np.random.default_rng(0)
    summ = evaluate_policy(lambda s: ToyDomain().action_space.uniform(rng), ToyDomain(), w, SPEC,
                           n_rollouts=50, max_steps=50)
    assert summ["collision_rate"] > 0
    assert summ["success_rate"] + summ["collision_rate"] + summ["timeout_rate"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        evaluate_policy(lambda s: None, ToyDomain(), w, SPEC, n_rollouts=0)


def test_summary_matches_dumped_trajectories(tmp_path):
    obs = (RectObstacle((8.0, 0.0), (10.0, 12.0)),)
    w = WorldMap([0.0, 0.0], [30.0, 30.0], GoalRegion((25.0, 25.0), 4.0), obstacles=obs, start=[3.0, 3.0])
    summ = evaluate_policy(lambda s: np.array([math.pi / 4 + 0.3, 1.0]), ToyDomain(), w, SPEC,
                           n_rollouts=40, max_steps=30, seed=9)
    path = tmp_path / "t.csv"
    write_trajectories(path, summ["trajectories"])
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    by_roll = {}
    for r in rows:
        by_roll.setdefault(int(r["rollout"]), []).append(r)
    assert len(by_roll) == 40
    returns, outcomes = [], []
    for rs in by_roll.values():
        rew = [float(r["reward"]) for r in rs[1:]]
        dts = [float(r["a_2"]) for r in rs[1:]]
        t = np.concatenate([[0.0], np.cumsum(dts)[:-1]]) if dts else np.zeros(0)
        returns.append(float(np.sum(0.99 ** t * np.array(rew))))
        outcomes.append(rs[0]["outcome"])
    again = {
        "mean_reward": float(np.mean(returns)),
        "success_rate": outcomes.count("success") / 40,
        "collision_rate": outcomes.count("collision") / 40,
        "timeout_rate": outcomes.count("timeout") / 40,
    }
    for k, v in again.items():
        assert summ[k] == pytest.approx(v, rel=1e-12, abs=1e-12)
    assert summarize(summ["trajectories"])["mean_reward"] == summ["mean_reward"]


def test_toy_modes_match_the_declared_mixture():
    X = ToyDomain().sample_displacements(np.tile([0.0, 1.0], (100_000, 1)), np.random.default_rng(6))
    first = np.linalg.norm(X - [5, 5], axis=1) < np.linalg.norm(X - [5, -5], axis=1)
    for mask, mu in ((first, [5.0, 5.0]), (~first, [5.0, -5.0])):
        Y = X[mask]
        se = np.sqrt(2.0 / len(Y))
        assert np.all(np.abs(Y.mean(0) - mu) <= 3 * se)
        # Variance of a sample variance of a Gaussian is 2 sigma^4 / n.
        cov = np.cov(Y.T)
        assert np.all(np.abs(np.diag(cov) - 2.0) <= 3 * 2.0 * np.sqrt(2.0 / len(Y)))
        assert abs(cov[0, 1]) <= 3 * 2.0 / np.sqrt(len(Y))


@pytest.mark.parametrize("phi", [0.4, 2.0, -1.3])
def test_push_is_rotation_covariant(phi):
    a = np.tile([0.9, 0.3, 2.0], (10_000, 1))
    b = a.copy()
    b[:, 0] += phi
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    # Without jitter a shared seed gives exactly rotated samples.
    core = PushDomain(jitter=0.0)
    X = core.sample_displacements(a, np.random.default_rng(8))
    Y = core.sample_displacements(b, np.random.default_rng(8))
    np.testing.assert_allclose(Y, X @ rot.T, atol=1e-12)
    # Isotropic jitter keeps the law covariant; compare marginals after rotating back.
    d = PushDomain()
    X = d.sample_displacements(a, np.random.default_rng(8))
    Y = d.sample_displacements(b, np.random.default_rng(9)) @ rot
    for j in range(2):
        assert ks_2samp(X[:, j], Y[:, j]).pvalue > 1e-3


def test_simulators_are_seed_deterministic():
    for dom in (ToyDomain(), PushDomain()):
        a = dom.action_space.uniform(np.random.default_rng(0), 50)
        np.testing.assert_array_equal(dom.sample_displacements(a, np.random.default_rng(1)),
                                      dom.sample_displacements(a, np.random.default_rng(1)))
