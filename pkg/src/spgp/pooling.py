"""Positional pooling heads.

Every head turns an ``(N, P, M)`` embedding tensor into an ``(N, M)`` matrix
by a convex combination over positions. The heads differ only in how the raw
per-position parameters map to normalized weights:

* ``mean``     uniform ``1/P`` weights, no parameters
* ``softmax``  ``exp(raw) / sum(exp(raw))``
* ``sigmoid``  ``S(raw) / sum(S(raw))``
* ``prior``    ``w / sum(w)`` with ``w = exp(raw)`` under a Half-Cauchy prior
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import DataError, DegenerateMaskError, ShapeMismatchError

VARIANTS = ("mean", "softmax", "sigmoid", "prior")
TRAINABLE = ("softmax", "sigmoid", "prior")
DEFAULT_PRIOR_SCALE = 0.15
SPARSITY_THRESHOLD = 1e-5


@dataclass(eq=False)
class MaskHead:
    """Pooling variant plus its raw parameter vector.

    ``raw_params`` is ``None`` for the mean head. ``prior_scale`` is only
    consulted by the prior head and is never learned.
    """

    variant: str = "mean"
    raw_params: np.ndarray | None = None
    prior_scale: float = DEFAULT_PRIOR_SCALE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown mask variant {self.variant!r}")
        if self.variant == "mean":
            self.raw_params = None
        else:
            if self.raw_params is None:
                raise DataError(f"{self.variant} head needs raw_params")
            raw = np.array(self.raw_params, dtype=np.float64).ravel()
            if not np.all(np.isfinite(raw)):
                raise DataError("raw mask parameters must be finite")
            self.raw_params = raw
        if self.variant == "prior" and not self.prior_scale > 0:
            raise DataError("prior_scale must be positive")

    @classmethod
    def initial(cls, variant, n_positions, rng=None, scale=0.01, prior_scale=DEFAULT_PRIOR_SCALE):
        """Head close to mean pooling: raw params ~ Normal(0, scale**2)."""
        if variant == "mean":
            return cls("mean")
        rng = np.random.default_rng(rng)
        return cls(variant, scale * rng.standard_normal(n_positions), prior_scale)

    @property
    def trainable(self):
        return self.variant != "mean"

    def n_params(self):
        return 0 if self.raw_params is None else self.raw_params.size

    def with_params(self, raw_params):
        return MaskHead(self.variant, raw_params, self.prior_scale)

    def check_positions(self, n_positions):
        if self.raw_params is not None and self.raw_params.size != n_positions:
            raise ShapeMismatchError(
                f"mask has {self.raw_params.size} parameters, tensor has {n_positions} positions"
            )


def _softmax(raw):
    e = np.exp(raw - raw.max())
    return e / e.sum()


def normalized_weights(head, n_positions):
    """Non-negative weights over positions that sum to one."""
    head.check_positions(n_positions)
    if head.variant == "mean":
        return np.full(n_positions, 1.0 / n_positions)
    if head.variant == "sigmoid":
        s = expit(head.raw_params)
        total = s.sum()
        if not total > 0:
            raise DegenerateMaskError("sigmoid mask underflowed to zero everywhere")
        return s / total
    # softmax and prior share the same normalization; exp(raw)/sum(exp(raw))
    return _softmax(head.raw_params)


def _as_tensor(tensor):
    values = getattr(tensor, "values", tensor)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeMismatchError(f"expected an (N, P, M) tensor, got shape {values.shape}")
    return values


def pool(tensor, head):
    """Pooled ``(N, M)`` features ``sum_p w_p x_p``."""
    values = _as_tensor(tensor)
    w = normalized_weights(head, values.shape[1])
    return np.einsum("p,npm->nm", w, values)


def pool_jacobian_vec(tensor, head, cotangent):
    """Pull an ``(N, M)`` cotangent on the pooled features back to raw params.

    Returns the length-P vector ``sum_{n,m} cotangent[n, m] * d pooled[n, m] / d raw``.
    """
    if not head.trainable:
        raise DataError("mean pooling has no parameters to differentiate")
    values = _as_tensor(tensor)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (values.shape[0], values.shape[2]):
        raise ShapeMismatchError(
            f"cotangent shape {cotangent.shape} does not match pooled shape "
            f"{(values.shape[0], values.shape[2])}"
        )
    w = normalized_weights(head, values.shape[1])
    # gradient w.r.t. the normalized weights
    v = np.einsum("nm,npm->p", cotangent, values)
    centered = v - w @ v
    if head.variant == "sigmoid":
        s = expit(head.raw_params)
        return centered / s.sum() * s * (1.0 - s)
    return w * centered


def half_cauchy_log_prior(head):
    """Half-Cauchy(0, sigma) log-density of ``w = exp(raw)`` and its gradient in raw space.

    No change-of-variables term is included; the density is evaluated at ``w``.
    """
    if head.variant != "prior":
        raise DataError("Half-Cauchy prior applies to the prior head only")
    sigma = float(head.prior_scale)
    if not sigma > 0:
        raise DataError("prior_scale must be positive")
    # log(1 + (w/sigma)^2) with w = exp(raw), kept in log space against overflow
    t = 2.0 * (head.raw_params - np.log(sigma))
    logp = np.sum(np.log(2.0) - np.log(np.pi) - np.log(sigma) - np.logaddexp(0.0, t))
    grad = -2.0 * expit(t)
    return float(logp), grad


def sparsity_report(head, n_positions, threshold=SPARSITY_THRESHOLD):
    """Count normalized weights strictly below ``threshold``."""
    w = normalized_weights(head, n_positions)
    return {
        "zero_count": int(np.count_nonzero(w < threshold)),
        "threshold": float(threshold),
        "weights": w,
    }
