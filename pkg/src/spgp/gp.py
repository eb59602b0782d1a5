"""Exact zero-mean GP regression with a Matérn covariance on pooled features."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .exceptions import ConditioningError, DataError, ShapeMismatchError
from .pooling import pool, pool_jacobian_vec

KERNELS = ("matern32", "matern52")
DEFAULT_KERNEL = "matern32"

# jitter ladder relative to the signal variance; the first attempt is jitter-free
JITTER_START = 1e-10
JITTER_MAX = 1e-4
VARIANCE_FLOOR = -1e-10

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel and noise hyperparameters, stored as logs so every value is positive."""

    log_sigma_f2: float = 0.0
    log_sigma_l: float = 0.0
    log_sigma_eps2: float = np.log(0.1)

    def __post_init__(self):
        if not np.all(np.isfinite(self.to_array())):
            raise DataError("hyperparameters must be finite")

    @classmethod
    def from_values(cls, signal_variance, length_scale, noise_variance):
        return cls(float(np.log(signal_variance)), float(np.log(length_scale)),
                   float(np.log(noise_variance)))

    @classmethod
    def from_array(cls, theta):
        return cls(*(float(t) for t in theta))

    def to_array(self):
        return np.array([self.log_sigma_f2, self.log_sigma_l, self.log_sigma_eps2])

    @property
    def signal_variance(self):
        return float(np.exp(self.log_sigma_f2))

    @property
    def length_scale(self):
        return float(np.exp(self.log_sigma_l))

    @property
    def noise_variance(self):
        return float(np.exp(self.log_sigma_eps2))


@dataclass
class KernelMatrix:
    K: np.ndarray
    distances: np.ndarray
    jitter_used: float = 0.0


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    @property
    def std(self):
        return np.sqrt(self.variance)


def _check_kernel(kernel):
    if kernel not in KERNELS:
        raise DataError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def _profile(r, hp, kernel):
    """Kernel values and radial derivative factors at distances ``r``.

    Returns ``(k, dk_dlogl, g)`` where ``g`` satisfies
    ``dk(a, b)/da = g * (a - b)``; ``g`` is finite at ``r = 0``.
    """
    sf2 = hp.signal_variance
    ell = hp.length_scale
    if kernel == "matern32":
        u = np.sqrt(3.0) * r / ell
        e = np.exp(-u)
        k = sf2 * (1.0 + u) * e
        dk_dlogl = sf2 * u * u * e
        g = -sf2 * (3.0 / ell**2) * e
    else:
        s = np.sqrt(5.0) * r / ell
        e = np.exp(-s)
        k = sf2 * (1.0 + s + s * s / 3.0) * e
        dk_dlogl = sf2 * (s * s / 3.0) * (1.0 + s) * e
        g = -sf2 * (5.0 / (3.0 * ell**2)) * (1.0 + s) * e
    return k, dk_dlogl, g


def kernel(a, b, hp, kernel=DEFAULT_KERNEL):
    """Covariance between two feature vectors.

    ``matern32`` is ``sf2 (1 + sqrt3 r/l) exp(-sqrt3 r/l)``; ``matern52`` is
    ``sf2 (1 + sqrt5 r/l + 5r^2/(3l^2)) exp(-sqrt5 r/l)``.
    """
    _check_kernel(kernel)
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError("kernel arguments differ in dimension")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("kernel inputs must be finite")
    r = np.sqrt(np.sum((a - b) ** 2))
    return float(_profile(r, hp, kernel)[0])


def _features(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatchError(f"expected an (N, M) feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("features must be finite")
    return X


def cross_kernel(A, B, hp, kernel=DEFAULT_KERNEL):
    _check_kernel(kernel)
    A, B = _features(A), _features(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatchError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    return _profile(cdist(A, B), hp, kernel)[0]


def kernel_matrix(X, hp, kernel=DEFAULT_KERNEL):
    _check_kernel(kernel)
    X = _features(X)
    r = cdist(X, X)
    K = _profile(r, hp, kernel)[0]
    return KernelMatrix(K, r)


def factorize(K, noise_variance, signal_variance):
    """Lower Cholesky factor of ``K + noise I``, escalating jitter on failure.

    Returns ``(L, jitter_used)``.
    """
    n = K.shape[0]
    base = K + noise_variance * np.eye(n)
    ladder = [0.0]
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        ladder.append(jitter)
        jitter *= 10.0
    for rel in ladder:
        jitter = rel * signal_variance
        try:
            L = cholesky(base + jitter * np.eye(n), lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            continue
        return L, jitter
    raise ConditioningError(
        f"Cholesky failed up to jitter {JITTER_MAX * signal_variance:.3g} "
        f"(N={n}, noise={noise_variance:.3g}, signal={signal_variance:.3g})"
    )


def _targets(y, n):
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != n:
        raise ShapeMismatchError(f"{y.size} targets for {n} feature rows")
    return y


def _lml_from_factor(L, y):
    alpha = cho_solve((L, True), y)
    n = y.size
    return -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI, alpha


def log_marginal_likelihood(X, y, hp, kernel=DEFAULT_KERNEL):
    km = kernel_matrix(X, hp, kernel)
    y = _targets(y, km.K.shape[0])
    L, _ = factorize(km.K, hp.noise_variance, hp.signal_variance)
    return float(_lml_from_factor(L, y)[0])


def lml_and_gradients(X, y, hp, kernel=DEFAULT_KERNEL):
    """Log marginal likelihood with gradients w.r.t. the log hyperparameters
    and w.r.t. the feature matrix itself.

    Returns ``(lml, grad_hypers, grad_X)``; ``grad_hypers`` is ordered like
    ``GpHyperparams.to_array()``.
    """
    _check_kernel(kernel)
    X = _features(X)
    n = X.shape[0]
    y = _targets(y, n)
    r = cdist(X, X)
    K, dK_dlogl, g = _profile(r, hp, kernel)
    L, _ = factorize(K, hp.noise_variance, hp.signal_variance)
    lml, alpha = _lml_from_factor(L, y)

    C_inv = cho_solve((L, True), np.eye(n))
    G = 0.5 * (np.outer(alpha, alpha) - C_inv)
    grad_hypers = np.array([
        np.sum(G * K),
        np.sum(G * dK_dlogl),
        hp.noise_variance * np.trace(G),
    ])
    A = G * g
    grad_X = 2.0 * (A.sum(axis=1)[:, None] * X - A @ X)
    return float(lml), grad_hypers, grad_X


def mll_gradients(tensor, head, y, hp, kernel=DEFAULT_KERNEL):
    """Marginal likelihood of ``y`` given pooled ``tensor`` and its gradients.

    Returns ``(lml, grad_hypers, grad_mask)``; ``grad_mask`` is ``None`` for
    the mean head.
    """
    X = pool(tensor, head)
    lml, grad_hypers, grad_X = lml_and_gradients(X, y, hp, kernel)
    grad_mask = pool_jacobian_vec(tensor, head, grad_X) if head.trainable else None
    return lml, grad_hypers, grad_mask


def predictive(X, y, L, Z, hp, kernel=DEFAULT_KERNEL, full_cov=False):
    """Posterior over latent values at test features ``Z`` given the factor ``L``
    of ``K(X, X) + noise I``.

    Variances slightly below zero from rounding are clamped to zero; anything
    below ``-1e-10 * max(1, sf2)`` raises.
    """
    X = _features(X)
    Z = _features(Z)
    if Z.shape[1] != X.shape[1]:
        raise ShapeMismatchError(
            f"test features have {Z.shape[1]} dims, training features have {X.shape[1]}"
        )
    y = _targets(y, X.shape[0])
    alpha = cho_solve((L, True), y)
    Ks = cross_kernel(Z, X, hp, kernel)
    mean = Ks @ alpha
    v = solve_triangular(L, Ks.T, lower=True)
    if full_cov:
        cov = cross_kernel(Z, Z, hp, kernel) - v.T @ v
        variance = np.diag(cov).copy()
    else:
        cov = None
        variance = hp.signal_variance - np.einsum("ij,ij->j", v, v)
    # cancellation error scales with the prior variance
    if np.any(variance < VARIANCE_FLOOR * max(1.0, hp.signal_variance)):
        raise ConditioningError(f"negative predictive variance {variance.min():.3g}")
    variance = np.maximum(variance, 0.0)
    if cov is not None:
        np.fill_diagonal(cov, variance)
    return PredictiveDistribution(mean, variance, cov)


def posterior(X, y, Z, hp, kernel=DEFAULT_KERNEL, full_cov=False):
    """Convenience wrapper: factorize and predict in one call."""
    km = kernel_matrix(X, hp, kernel)
    L, _ = factorize(km.K, hp.noise_variance, hp.signal_variance)
    return predictive(X, y, L, Z, hp, kernel, full_cov)
