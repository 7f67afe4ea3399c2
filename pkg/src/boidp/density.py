"""Memory-based local transition densities.

For a query action the displacement outcomes of the ``M`` most similar
dataset actions (1-norm) are fitted with a Gaussian mixture by EM, the
component count chosen by BIC.  Fits are memoised per (optionally quantised)
action, so repeated queries are cheap.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .domain import Dataset

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
COV_REG = 1e-6


def logsumexp(a: np.ndarray, axis: int = 1) -> np.ndarray:
    # scipy.special.logsumexp is ~4x slower on the small arrays used here.
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return np.squeeze(mx + np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)), axis=axis)


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    degenerate: bool = False
    loglik_history: tuple = ()
    converged: bool = True
    _chol_inv: np.ndarray = field(init=False, repr=False, default=None)
    _log_norm: np.ndarray = field(init=False, repr=False, default=None)
    _balls: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(
            self.k, self.dim, self.dim
        )
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError(f"invalid mixture weights {self.weights}")
        chol = np.linalg.cholesky(self.covariances)
        self._chol_inv = np.linalg.inv(chol)
        log_det_half = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            self._log_norm = np.log(self.weights) - 0.5 * self.dim * LOG_2PI - log_det_half

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x; mu_k, Sigma_k)`` with shape ``(n, K)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        diff = x[:, None, :] - self.means[None, :, :]
        sol = np.einsum("kij,nkj->nki", self._chol_inv, diff)
        maha = np.einsum("nki,nki->nk", sol, sol)
        return self._log_norm[None, :] - 0.5 * maha

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(x), axis=1)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, rng: np.random.Generator, n: int | None = None, return_labels: bool = False):
        m = 1 if n is None else n
        labels = rng.choice(self.k, size=m, p=self.weights)
        z = rng.standard_normal((m, self.dim))
        chol = np.linalg.cholesky(self.covariances)
        out = self.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
        if n is None:
            out, labels = out[0], labels[0]
        return (out, labels) if return_labels else out

    def rotated(self, theta: float) -> "GaussianMixture":
        """Rotate a planar mixture (first two coordinates) by ``theta``."""
        c, s = math.cos(theta), math.sin(theta)
        R = np.eye(self.dim)
        R[:2, :2] = [[c, -s], [s, c]]
        covs = np.einsum("ij,kjl,ml->kim", R, self.covariances, R)
        covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
        return GaussianMixture(
            self.weights, self.means @ R.T, covs, degenerate=self.degenerate,
            loglik_history=self.loglik_history, converged=self.converged,
        )

    def level_set_balls(self, epsilon: float) -> list[tuple[np.ndarray, float]]:
        """Balls ``(centre, radius)`` whose union contains ``{x : pdf(x) > epsilon}``.

        If the mixture exceeds ``epsilon`` then some weighted component exceeds
        ``epsilon / K``, which bounds its Mahalanobis distance; the largest
        covariance eigenvalue converts that into a Euclidean radius.
        """
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        cached = self._balls.get(epsilon)
        if cached is not None:
            return cached
        limit = 2.0 * (self._log_norm - math.log(epsilon / self.k))
        lam_max = np.linalg.eigvalsh(self.covariances)[:, -1]
        balls = [(self.means[k], math.sqrt(limit[k] * lam_max[k]) * (1 + 1e-9) + 1e-12)
                 for k in range(self.k) if limit[k] > 0]
        self._balls[epsilon] = balls
        return balls

    def n_parameters(self) -> int:
        d = self.dim
        return self.k - 1 + self.k * d + self.k * d * (d + 1) // 2


def gmm_pdf(g: GaussianMixture, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != g.dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, mixture {g.dim}")
    return float(g.pdf(x.reshape(1, -1))[0])


def gmm_sample(g: GaussianMixture, rng: np.random.Generator) -> np.ndarray:
    return g.sample(rng)


def nearest_action_subset(dataset: Dataset, a, M: int) -> np.ndarray:
    """Displacements of the ``M`` records closest to ``a`` in 1-norm.

    Ties are broken by dataset index.
    """
    idx = nearest_action_indices(dataset.actions, a, M)
    return dataset.deltas[idx]


def nearest_action_indices(actions: np.ndarray, a, M: int) -> np.ndarray:
    n = actions.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= {n}, got {M}")
    dist = np.abs(actions - np.asarray(a, dtype=float)).sum(axis=1)
    if M == n:
        return np.argsort(dist, kind="stable")
    kth = np.partition(dist, M - 1)[M - 1]
    cand = np.flatnonzero(dist <= kth)
    return cand[np.argsort(dist[cand], kind="stable")[:M]]


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator, lloyd_iters: int = 10) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    C = np.array(centers)
    for _ in range(lloyd_iters):
        lab = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
        newC = np.array([X[lab == k].mean(axis=0) if np.any(lab == k) else C[k] for k in range(K)])
        if np.allclose(newC, C):
            break
        C = newC
    return C


_TINY = 10 * np.finfo(float).eps


def _m_step(X: np.ndarray, resp: np.ndarray, reg: float, XT: np.ndarray | None = None):
    """M-step with component-major responsibilities ``resp`` of shape (K, n)."""
    d = X.shape[1]
    XT = np.ascontiguousarray(X.T) if XT is None else XT
    nk = resp.sum(axis=1) + _TINY
    means = (resp @ X) / nk[:, None]
    diff = XT[None] - means[:, :, None]
    covs = np.matmul(diff * resp[:, None, :], diff.transpose(0, 2, 1)) / nk[:, None, None]
    covs[:, np.arange(d), np.arange(d)] += reg
    return nk / nk.sum(), means, covs


def _component_logpdf_t(X, weights, means, covs, XT: np.ndarray | None = None):
    """Weighted component log densities, shape (K, n)."""
    d = X.shape[1]
    XT = np.ascontiguousarray(X.T) if XT is None else XT
    chol = np.linalg.cholesky(covs)
    sol = np.matmul(np.linalg.inv(chol), XT[None] - means[:, :, None])
    out = np.einsum("kin,kin->kn", sol, sol)
    log_det_half = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    out *= -0.5
    out += (np.log(weights) - 0.5 * d * LOG_2PI - log_det_half)[:, None]
    return out


def _component_logpdf(X, weights, means, covs):
    return _component_logpdf_t(X, weights, means, covs).T


def _canonical_order(X: np.ndarray) -> np.ndarray:
    return X[np.lexsort(X.T[::-1])]


def fit_gmm_em(points, K: int, seed: int = 0, tol: float = 1e-8, max_iter: int = 500,
               reg: float = COV_REG) -> GaussianMixture:
    """Fit a K-component full-covariance mixture by EM.

    Points are put in lexicographic order first so the result does not depend
    on the input ordering.  Initialisation is k-means++ followed by a few
    Lloyd iterations.  Stops when the total log-likelihood improves by less
    than ``tol`` or after ``max_iter`` iterations.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = X.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K * (d + 1):
        raise ValueError(f"need at least {K * (d + 1)} points for K={K}, d={d}; got {n}")
    X = _canonical_order(X)

    if K > 1 and np.unique(X, axis=0).shape[0] < K:
        base = fit_gmm_em(X, 1, seed, tol, max_iter, reg)
        logger.warning("degenerate input for K=%d: fewer than K distinct points", K)
        return GaussianMixture(
            np.full(K, 1.0 / K), np.repeat(base.means, K, axis=0),
            np.repeat(base.covariances, K, axis=0), degenerate=True,
            loglik_history=base.loglik_history,
        )

    rng = np.random.default_rng(seed)
    if K == 1:
        resp = np.ones((1, n))
    else:
        C = _kmeans_pp(X, K, rng)
        lab = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
        resp = np.zeros((K, n))
        resp[lab, np.arange(n)] = 1.0
    XT = np.ascontiguousarray(X.T)
    weights, means, covs = _m_step(X, resp, reg, XT)

    history = []
    converged = False
    for _ in range(max_iter):
        comp = _component_logpdf_t(X, weights, means, covs, XT)
        mx = np.max(comp, axis=0)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(comp - mx)
        tot = e.sum(axis=0)
        ll = float((mx + np.log(tot)).sum())
        if history and ll - history[-1] < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        resp = e / tot
        weights, means, covs = _m_step(X, resp, reg, XT)
    else:
        history.append(float(logsumexp(_component_logpdf_t(X, weights, means, covs), axis=0).sum()))
    g = GaussianMixture(weights, means, covs)
    g.loglik_history = tuple(history)
    g.converged = converged
    return g


def bic(g: GaussianMixture, n: int) -> float:
    return -2.0 * g.loglik_history[-1] + g.n_parameters() * math.log(n)


def select_k_bic(points, k_max: int, seed: int = 0) -> GaussianMixture:
    """Fit K = 1..k_max and return the fit with the lowest BIC."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = X.shape
    best, best_bic = None, math.inf
    for K in range(1, k_max + 1):
        if n < K * (d + 1):
            break
        g = fit_gmm_em(X, K, seed)
        if g.degenerate:
            break
        score = bic(g, n)
        if score < best_bic:
            best, best_bic = g, score
    if best is None:
        best = fit_gmm_em(X, 1, seed)
    return best


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class LocalDensityModel:
    """Lazy ``p(ds | a)`` backed by a dataset.

    Parameters
    ----------
    n_neighbors:
        Size ``M`` of the neighbour subset fitted for each query.
    k_max, force_k:
        BIC search range, or a fixed component count when ``force_k`` is set.
    rotation_invariant:
        Treat control dimension ``angle_index`` as a planar heading: records
        are rotated into a heading-zero frame, neighbours are searched on the
        remaining action coordinates and fitted mixtures are rotated back.
    quantum:
        Optional grid step for the (canonical) action; queries falling in the
        same cell share one fit, computed at the cell centre.
    """

    def __init__(self, dataset: Dataset, n_neighbors: int = 200, k_max: int = 3,
                 force_k: int | None = None, seed: int = 0, rotation_invariant: bool = False,
                 angle_index: int = 0, quantum=None):
        if force_k is not None and force_k < 1:
            raise ValueError("force_k must be >= 1")
        self.dataset = dataset
        self.n_neighbors = min(n_neighbors, len(dataset))
        self.k_max = k_max
        self.force_k = force_k
        self.seed = seed
        self.rotation_invariant = rotation_invariant
        self.angle_index = angle_index
        self.quantum = None if quantum is None else np.asarray(quantum, dtype=float)
        self._fits: dict = {}
        self._rotated: dict = {}
        self._lock = threading.Lock()
        self.n_fits = 0

        if rotation_invariant:
            z = dataset.actions[:, angle_index]
            c, s = np.cos(-z), np.sin(-z)
            dx, dy = dataset.deltas[:, 0], dataset.deltas[:, 1]
            deltas = dataset.deltas.copy()
            deltas[:, 0] = c * dx - s * dy
            deltas[:, 1] = s * dx + c * dy
            self._actions = np.delete(dataset.actions, angle_index, axis=1)
            self._deltas = deltas
        else:
            self._actions = dataset.actions
            self._deltas = dataset.deltas

    @property
    def dim(self) -> int:
        return self.dataset.d_s

    def _canonical(self, a: np.ndarray):
        if self.rotation_invariant:
            return np.delete(a, self.angle_index), float(a[self.angle_index])
        return a, 0.0

    def _fit_for(self, key_point: np.ndarray) -> GaussianMixture:
        idx = nearest_action_indices(self._actions, key_point, self.n_neighbors)
        pts = self._deltas[idx]
        self.n_fits += 1
        if self.force_k is not None:
            return fit_gmm_em(pts, self.force_k, self.seed)
        return select_k_bic(pts, self.k_max, self.seed)

    def canonical_mixture(self, a) -> GaussianMixture:
        canon, _ = self._canonical(np.asarray(a, dtype=float))
        if self.quantum is None:
            key = canon.tobytes()
            point = canon
        else:
            cell = np.round(canon / self.quantum)
            key = cell.astype(np.int64).tobytes()
            point = cell * self.quantum
        g = self._fits.get(key)
        if g is None:
            g = self._fit_for(point)
            # Fits are deterministic, so a racing duplicate insert is harmless.
            self._fits[key] = g
        return g

    def mixture(self, a) -> GaussianMixture:
        """Displacement mixture for action ``a``."""
        a = np.asarray(a, dtype=float)
        if not self.rotation_invariant:
            return self.canonical_mixture(a)
        key = a.tobytes()
        g = self._rotated.get(key)
        if g is None:
            g = self.canonical_mixture(a).rotated(float(a[self.angle_index]))
            with self._lock:
                if len(self._rotated) > 200_000:
                    self._rotated.clear()
                self._rotated[key] = g
        return g

    def pdf(self, a, deltas: np.ndarray) -> np.ndarray:
        return self.mixture(a).pdf(np.atleast_2d(deltas))

    def mean_displacement(self, a) -> np.ndarray:
        return self.mixture(a).mean()

    def sample(self, a, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        return self.mixture(a).sample(rng, n)
