import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from boidp.gp import (
    GpFactorizationError, GpPosterior, KernelSpec, gp_fit, gp_predict, gp_predict_many, gp_update,
    kernel_eval, log_marginal_likelihood, matern52, refit_hyperparameters,
)


def dense_oracle(kernel, X, y, A):
    K = matern52(kernel, X, X) + kernel.noise_variance * np.eye(len(X))
    Ks = matern52(kernel, X, A)
    mu = Ks.T @ np.linalg.solve(K, y)
    var = kernel.signal_variance - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks))
    return mu, np.sqrt(np.maximum(var, 0.0))


def incremental(kernel, X, y):
    g = GpPosterior(kernel)
    for a, v in zip(X, y):
        g = gp_update(g, a, v)
    return g


K2 = KernelSpec(1.3, (0.7, 1.9), 1e-3)


def test_kernel_basics():
    a = np.array([0.3, -1.0])
    assert kernel_eval(K2, a, a) == 1.3
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a1, a2 = rng.normal(size=(2, 2))
        assert kernel_eval(K2, a1, a2) == kernel_eval(K2, a2, a1)
    k1 = KernelSpec(1.0, (1.0,))
    vals = [kernel_eval(k1, [0.0], [r]) for r in np.linspace(1.0, 30.0, 300)]
    assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-9


def test_kernel_validation():
    with pytest.raises(ValueError):
        KernelSpec(0.0, (1.0,))
    with pytest.raises(ValueError):
        KernelSpec(1.0, (1.0, -1.0))


def test_single_observation_closed_form():
    k = KernelSpec(2.0, (1.0,), 0.5)
    g = gp_update(GpPosterior(k), [0.4], 3.0)
    mu, _ = gp_predict(g, [0.4])
    assert mu == pytest.approx(3.0 * 2.0 / 2.5, rel=1e-12)


def test_prior_prediction():
    mu, sd = gp_predict(GpPosterior(KernelSpec(4.0, (1.0,))), [1.0])
    assert (mu, sd) == (0.0, 2.0)


def test_interpolation_limit():
    k = KernelSpec(1.0, (1.0, 1.0), 1e-10)
    X = np.random.default_rng(0).normal(size=(10, 2)) * 3
    y = np.sin(X[:, 0])
    mu, _ = gp_predict_many(gp_fit(k, X, y), X)
    np.testing.assert_allclose(mu, y, atol=1e-6)


def test_duplicate_point_keeps_the_mean():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(8, 2))
    y = rng.normal(size=8)
    g2 = gp_update(gp_fit(K2, X, y), X[3], float(y[3]))
    m_oracle, _ = dense_oracle(K2, np.vstack([X, X[3]]), np.append(y, y[3]), X[3:4])
    assert gp_predict(g2, X[3])[0] == pytest.approx(float(m_oracle[0]), abs=1e-8)
    k = KernelSpec(1.3, (0.7, 1.9), 1e-12)
    g = gp_fit(k, X, y)
    before = gp_predict(g, X[3])[0]
    after = gp_predict(gp_update(g, X[3], float(y[3])), X[3])[0]
    assert after == pytest.approx(before, abs=1e-8)


@given(st.integers(0, 10**6))
def test_update_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 2)) * 2
    y = rng.normal(size=12)
    A = rng.normal(size=(30, 2)) * 2
    perm = rng.permutation(12)
    m1, s1 = gp_predict_many(incremental(K2, X, y), A)
    m2, s2 = gp_predict_many(incremental(K2, X[perm], y[perm]), A)
    np.testing.assert_allclose(m1, m2, atol=1e-9)
    np.testing.assert_allclose(s1, s2, atol=1e-9)


def test_matches_dense_solve():
    rng = np.random.default_rng(2)
    X = rng.uniform(-3, 3, size=(20, 2))
    y = np.cos(X).sum(1)
    A = rng.uniform(-3, 3, size=(50, 2))
    mu, sd = gp_predict_many(incremental(K2, X, y), A)
    m0, s0 = dense_oracle(K2, X, y, A)
    np.testing.assert_allclose(mu, m0, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(sd, s0, rtol=1e-8, atol=1e-12)


def test_fixed_affine_scaling():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(10, 2))
    y = 50 + 10 * rng.normal(size=10)
    A = rng.normal(size=(5, 2))
    g = gp_fit(K2, X, y, shift=40.0, scale=20.0)
    m0, s0 = dense_oracle(K2, X, (y - 40.0) / 20.0, A)
    mu, sd = gp_predict_many(g, A)
    np.testing.assert_allclose(mu, 40.0 + 20.0 * m0, rtol=1e-10)
    np.testing.assert_allclose(sd, 20.0 * s0, rtol=1e-10)
    np.testing.assert_allclose(g.target_kernel(A, A), 400.0 * matern52(K2, A, A))


def test_normalized_targets_use_median_and_iqr():
    y = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    g = gp_fit(KernelSpec(1.0, (1.0,)), np.arange(5.0)[:, None], y, normalize=True)
    assert g.shift == 3.0 and g.scale == 2.0
    g = gp_fit(KernelSpec(1.0, (1.0,)), np.arange(3.0)[:, None], np.ones(3), normalize=True)
    assert g.scale == 1.0


def test_rejects_bad_targets_and_singular_updates():
    with pytest.raises(ValueError):
        gp_fit(K2, np.zeros((1, 2)), [np.nan])
    with pytest.raises(ValueError):
        gp_update(GpPosterior(K2), [0.0, 0.0], math.inf)
    tiny = KernelSpec(1.0, (1.0,), 1e-300)
    g = gp_update(GpPosterior(tiny), [0.0], 1.0)
    with pytest.raises(GpFactorizationError):
        gp_update(g, [0.0], 1.0)


def test_refit_beats_generating_parameters():
    rng = np.random.default_rng(4)
    true = KernelSpec(1.0, (0.8,), 1e-2)
    X = rng.uniform(0, 5, size=(40, 1))
    L = np.linalg.cholesky(matern52(true, X, X) + true.noise_variance * np.eye(40))
    y = L @ rng.standard_normal(40)
    g = gp_fit(KernelSpec(1.0, (0.1,), 1e-4), X, y)
    g2 = refit_hyperparameters(g, seed=0)
    assert log_marginal_likelihood(g2) >= log_marginal_likelihood(g, true) - 1e-6
    assert log_marginal_likelihood(g2) >= log_marginal_likelihood(g)


def test_constant_data_grows_lengthscales():
    grew = 0
    for seed in range(10):
        X = np.random.default_rng(seed).uniform(0, 1, size=(15, 2))
        g = gp_fit(KernelSpec(1.0, (0.2, 0.2), 1e-4), X, np.full(15, 0.5))
        g2 = refit_hyperparameters(g, seed=seed)
        grew += all(l2 > 0.2 for l2 in g2.kernel.lengthscales)
    assert grew >= 9
