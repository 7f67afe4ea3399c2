"""Gaussian-process regression over actions with a Matérn-5/2 kernel.

Posteriors are immutable: :func:`gp_update` returns a new object whose
Cholesky factor extends the old one by a single row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

SQRT5 = math.sqrt(5.0)

# Box for log-parameters explored by the hyperparameter search.
LOG_SV_BOUNDS = (math.log(1e-6), math.log(1e6))
LOG_LS_BOUNDS = (math.log(1e-4), math.log(1e4))
LOG_NOISE_BOUNDS = (math.log(1e-8), math.log(1e2))


@dataclass(frozen=True)
class KernelSpec:
    signal_variance: float
    lengthscales: tuple
    noise_variance: float = 1e-4

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_variance > 0 or not self.noise_variance > 0 or min(ls) <= 0:
            raise ValueError("kernel parameters must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        return np.log([self.signal_variance, *self.lengthscales, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> "KernelSpec":
        theta = np.exp(np.asarray(theta, dtype=float))
        return cls(float(theta[0]), tuple(theta[1:-1]), float(theta[-1]))


def matern52(k: KernelSpec, X1, X2) -> np.ndarray:
    """Kernel matrix between the rows of ``X1`` and ``X2``."""
    ls = np.asarray(k.lengthscales)
    A = np.atleast_2d(np.asarray(X1, dtype=float)) / ls
    B = np.atleast_2d(np.asarray(X2, dtype=float)) / ls
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    r = np.sqrt(np.maximum(d2, 0.0))
    sr = SQRT5 * r
    return k.signal_variance * (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)


def kernel_eval(k: KernelSpec, a1, a2) -> float:
    # Direct form (no expanded squares) so that kernel_eval(a, a) is exact.
    d = (np.asarray(a1, dtype=float) - np.asarray(a2, dtype=float)) / np.asarray(k.lengthscales)
    sr = SQRT5 * math.sqrt(float(d @ d))
    return k.signal_variance * (1.0 + sr + sr * sr / 3.0) * math.exp(-sr)


class GpFactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpPosterior:
    """Observations, kernel and the factor ``L L^T = K + noise I``.

    Targets are modelled as ``(y - shift) / scale``.  With ``normalize=True``
    the map is refreshed from the data as ``(y - median) / IQR`` (scale 1 when
    the IQR vanishes); otherwise ``shift`` and ``scale`` stay fixed.
    Predictions are reported in the original units.
    """

    kernel: KernelSpec
    X: np.ndarray = field(default=None, repr=False)
    y: np.ndarray = field(default=None, repr=False)
    chol: np.ndarray = field(default=None, repr=False)
    normalize: bool = False
    shift: float = 0.0
    scale: float = 1.0
    alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.X is None:
            object.__setattr__(self, "X", np.zeros((0, self.kernel.dim)))
            object.__setattr__(self, "y", np.zeros(0))
            object.__setattr__(self, "chol", np.zeros((0, 0)))
            object.__setattr__(self, "alpha", np.zeros(0))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def y_normalized(self) -> np.ndarray:
        return (self.y - self.shift) / self.scale

    def target_kernel(self, X1, X2) -> np.ndarray:
        """Prior covariance expressed in the units of the targets."""
        return matern52(self.kernel, X1, X2) * self.scale**2


def _scaling(y: np.ndarray, normalize: bool, shift: float, scale: float) -> tuple[float, float]:
    if not normalize:
        return shift, scale
    if y.size == 0:
        return 0.0, 1.0
    q25, med, q75 = np.percentile(y, [25, 50, 75])
    iqr = float(q75 - q25)
    return float(med), iqr if iqr > 0 else 1.0


def _finish(kernel, X, y, L, normalize, shift=0.0, scale=1.0) -> GpPosterior:
    shift, scale = _scaling(y, normalize, shift, scale)
    alpha = cho_solve((L, True), (y - shift) / scale) if y.size else np.zeros(0)
    return GpPosterior(kernel, X, y, L, normalize, shift, scale, alpha)


def _factor(kernel: KernelSpec, X: np.ndarray) -> np.ndarray:
    K = matern52(kernel, X, X) + kernel.noise_variance * np.eye(X.shape[0])
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise GpFactorizationError(
            "covariance not positive definite; increase the noise floor") from exc


def gp_fit(kernel: KernelSpec, X, y, normalize: bool = False, shift: float = 0.0,
           scale: float = 1.0) -> GpPosterior:
    """Posterior from scratch via a dense factorisation.

    Without ``normalize`` the fixed affine map ``(y - shift) / scale`` is used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float)).reshape(-1, kernel.dim)
    y = np.asarray(y, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite target")
    return _finish(kernel, X, y, _factor(kernel, X), normalize, shift, scale)


def gp_update(g: GpPosterior, a, y: float) -> GpPosterior:
    """Add one observation using a bordered Cholesky extension."""
    if not math.isfinite(y):
        raise ValueError("non-finite target")
    a = np.asarray(a, dtype=float).reshape(1, -1)
    k_new = matern52(g.kernel, g.X, a)[:, 0]
    l = solve_triangular(g.chol, k_new, lower=True) if g.n else np.zeros(0)
    pivot = g.kernel.signal_variance + g.kernel.noise_variance - float(l @ l)
    if not pivot > 0:
        raise GpFactorizationError(
            "covariance not positive definite; increase the noise floor")
    n = g.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = g.chol
    L[n, :n] = l
    L[n, n] = math.sqrt(pivot)
    return _finish(g.kernel, np.vstack([g.X, a]), np.append(g.y, y), L, g.normalize, g.shift, g.scale)


def gp_predict_many(g: GpPosterior, A) -> tuple[np.ndarray, np.ndarray]:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    sv = g.kernel.signal_variance
    if g.n == 0:
        return np.full(A.shape[0], g.shift), np.full(A.shape[0], math.sqrt(sv) * g.scale)
    Ks = matern52(g.kernel, g.X, A)
    mu = Ks.T @ g.alpha
    v = solve_triangular(g.chol, Ks, lower=True)
    var = np.maximum(sv - (v * v).sum(0), 0.0)
    return g.shift + g.scale * mu, g.scale * np.sqrt(var)


def gp_predict(g: GpPosterior, a) -> tuple[float, float]:
    mu, sd = gp_predict_many(g, np.asarray(a, dtype=float).reshape(1, -1))
    return float(mu[0]), float(sd[0])


def log_marginal_likelihood(g: GpPosterior, kernel: KernelSpec | None = None) -> float:
    """Log evidence of the (normalised) targets under ``kernel``."""
    if kernel is None:
        L = g.chol
        alpha = g.alpha
    else:
        try:
            L = _factor(kernel, g.X)
        except GpFactorizationError:
            return -math.inf
        alpha = cho_solve((L, True), g.y_normalized)
    yn = g.y_normalized
    return float(-0.5 * yn @ alpha - np.log(np.diag(L)).sum() - 0.5 * g.n * math.log(2 * math.pi))


def refit_hyperparameters(g: GpPosterior, n_starts: int = 4, evals_per_start: int = 64,
                          seed: int = 0) -> GpPosterior:
    """Maximise the log evidence over log-parameters with Nelder-Mead restarts.

    The first start is the current kernel; the others are random
    perturbations of it.  The incoming kernel is kept unless a strictly
    better one is found.
    """
    if g.n < 3:
        return g
    base = g.kernel.to_log()
    bounds = [LOG_SV_BOUNDS] + [LOG_LS_BOUNDS] * g.kernel.dim + [LOG_NOISE_BOUNDS]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best_theta = base
    best_ll = log_marginal_likelihood(g)

    def objective(theta):
        ll = log_marginal_likelihood(g, KernelSpec.from_log(np.clip(theta, lo, hi)))
        return -ll if math.isfinite(ll) else 1e300

    rng = np.random.default_rng(seed)
    for i in range(n_starts):
        x0 = np.clip(base if i == 0 else base + rng.normal(0.0, 1.0, base.shape), lo, hi)
        res = minimize(objective, x0, method="Nelder-Mead", bounds=bounds,
                       options={"maxfev": evals_per_start, "xatol": 1e-6, "fatol": 1e-9})
        ll = -float(res.fun)
        if ll > best_ll:
            best_ll, best_theta = ll, np.clip(res.x, lo, hi)
    if best_theta is base:
        return g
    kernel = KernelSpec.from_log(best_theta)
    return _finish(kernel, g.X, g.y, _factor(kernel, g.X), g.normalize, g.shift, g.scale)


def with_kernel(g: GpPosterior, kernel: KernelSpec) -> GpPosterior:
    if g.n == 0:
        return replace(g, kernel=kernel)
    return _finish(kernel, g.X, g.y, _factor(kernel, g.X), g.normalize, g.shift, g.scale)
