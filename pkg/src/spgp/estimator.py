"""scikit-learn compatible wrappers around the functional core."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import trainer
from .exceptions import ShapeMismatchError
from .pooling import DEFAULT_PRIOR_SCALE, MaskHead, normalized_weights, pool, sparsity_report


def check_tensor(X, n_positions=None, n_dims=None):
    """Validate an ``(N, P, M)`` float tensor, optionally against known P and M."""
    X = getattr(X, "values", X)
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3:
        raise ShapeMismatchError(f"expected an (N, P, M) tensor, got {X.ndim} dimensions")
    if n_positions is not None and X.shape[1] != n_positions:
        raise ShapeMismatchError(f"tensor has {X.shape[1]} positions, expected {n_positions}")
    if n_dims is not None and X.shape[2] != n_dims:
        raise ShapeMismatchError(f"tensor has {X.shape[2]} dims, expected {n_dims}")
    return X


def check_targets(y, n):
    y = check_array(y, ensure_2d=False, dtype=np.float64, ensure_all_finite=True).ravel()
    if y.size != n:
        raise ShapeMismatchError(f"{y.size} targets for {n} sequences")
    return y


class MaskPooler(TransformerMixin, BaseEstimator):
    """Stateless pooling transformer: ``(N, P, M) -> (N, M)``.

    ``raw_params`` of ``None`` on a trainable variant means all zeros, which
    is mean pooling.
    """

    def __init__(self, variant="mean", raw_params=None, prior_scale=DEFAULT_PRIOR_SCALE):
        self.variant = variant
        self.raw_params = raw_params
        self.prior_scale = prior_scale

    def fit(self, X, y=None):
        X = check_tensor(X)
        raw = self.raw_params
        if self.variant != "mean" and raw is None:
            raw = np.zeros(X.shape[1])
        self.head_ = MaskHead(self.variant, raw, self.prior_scale)
        self.head_.check_positions(X.shape[1])
        self.n_positions_in_ = X.shape[1]
        self.weights_ = normalized_weights(self.head_, X.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "head_")
        X = check_tensor(X, self.n_positions_in_)
        return pool(X, self.head_)


class MaskedGPRegressor(RegressorMixin, BaseEstimator):
    """Exact GP regression on masked-pooled embeddings.

    Parameters mirror :class:`spgp.trainer.TrainConfig`; ``random_state``
    must be an integer so fits are reproducible.

    Attributes
    ----------
    model_ : TrainedModel
    mask_weights_ : ndarray of shape (P,)
    hypers_ : GpHyperparams
    log_marginal_likelihood_value_ : float
        Final training objective (including the prior term for ``variant="prior"``).
    """

    def __init__(self, variant="mean", kernel="matern32", prior_scale=DEFAULT_PRIOR_SCALE,
                 max_iters=2000, restarts=4, step_rule="adaptive", learning_rate=0.05,
                 tol=1e-7, standardize=True, freeze_mask=False, random_state=0, n_jobs=1):
        self.variant = variant
        self.kernel = kernel
        self.prior_scale = prior_scale
        self.max_iters = max_iters
        self.restarts = restarts
        self.step_rule = step_rule
        self.learning_rate = learning_rate
        self.tol = tol
        self.standardize = standardize
        self.freeze_mask = freeze_mask
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return trainer.TrainConfig(
            variant=self.variant, prior_scale=self.prior_scale, kernel=self.kernel,
            max_iters=self.max_iters, restarts=self.restarts, step_rule=self.step_rule,
            learning_rate=self.learning_rate, tolerance=self.tol, seed=int(self.random_state or 0),
            standardize=self.standardize, freeze_mask=self.freeze_mask,
            threads=int(self.n_jobs or 1),
        )

    def fit(self, X, y):
        X = check_tensor(X)
        y = check_targets(y, X.shape[0])
        self._set_fitted(trainer.fit(X, y, self._config()))
        return self

    def fit_restricted(self, X, y, mutation_counts):
        """Fit on the single mutants of ``X`` only."""
        X = check_tensor(X)
        y = check_targets(y, X.shape[0])
        self._set_fitted(trainer.fit_restricted(X, y, mutation_counts, self._config()))
        return self

    def _set_fitted(self, model):
        self.model_ = model
        self.n_positions_in_ = model.n_positions
        self.n_dims_in_ = model.n_dims
        self.hypers_ = model.hypers
        self.mask_weights_ = normalized_weights(model.head, model.n_positions)
        self.log_marginal_likelihood_value_ = model.objective

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained (e.g. loaded) model."""
        cfg = model.config or {}
        est = cls(variant=model.head.variant, kernel=model.kernel,
                  prior_scale=model.head.prior_scale, random_state=cfg.get("seed", 0))
        est._set_fitted(model)
        return est

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "model_")
        X = check_tensor(X, self.n_positions_in_, self.n_dims_in_)
        dist = self.model_.predict(X, full_cov=return_cov)
        if return_cov:
            return dist.mean, dist.covariance
        if return_std:
            return dist.mean, dist.std
        return dist.mean

    def predict_distribution(self, X, full_cov=False):
        check_is_fitted(self, "model_")
        X = check_tensor(X, self.n_positions_in_, self.n_dims_in_)
        return self.model_.predict(X, full_cov=full_cov)

    def pooler(self):
        """A fitted :class:`MaskPooler` carrying the learned mask."""
        check_is_fitted(self, "model_")
        head = self.model_.head
        p = MaskPooler(head.variant, head.raw_params, head.prior_scale)
        p.head_ = head
        p.n_positions_in_ = self.n_positions_in_
        p.weights_ = self.mask_weights_
        return p

    def sparsity_report(self, threshold=1e-5):
        check_is_fitted(self, "model_")
        return sparsity_report(self.model_.head, self.n_positions_in_, threshold)
