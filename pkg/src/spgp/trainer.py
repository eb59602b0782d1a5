"""Joint marginal-likelihood maximization over GP hyperparameters and mask parameters."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gp
from .exceptions import ConditioningError, DataError, ShapeMismatchError, TrainingError
from .pooling import DEFAULT_PRIOR_SCALE, VARIANTS, MaskHead, half_cauchy_log_prior, pool

logger = logging.getLogger(__name__)

STEP_RULES = ("adaptive", "fixed")


@dataclass
class TrainConfig:
    variant: str = "mean"
    prior_scale: float = DEFAULT_PRIOR_SCALE
    kernel: str = gp.DEFAULT_KERNEL
    max_iters: int = 2000
    restarts: int = 4
    step_rule: str = "adaptive"
    learning_rate: float = 0.05
    tolerance: float = 1e-7
    patience: int = 5
    seed: int = 0
    standardize: bool = True
    freeze_mask: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")
        if self.kernel not in gp.KERNELS:
            raise DataError(f"unknown kernel {self.kernel!r}")
        if self.step_rule not in STEP_RULES:
            raise DataError(f"unknown step rule {self.step_rule!r}")
        if self.max_iters < 1 or self.restarts < 1 or self.patience < 1:
            raise DataError("max_iters, restarts and patience must be >= 1")
        if not self.tolerance > 0 or not self.learning_rate > 0:
            raise DataError("tolerance and learning_rate must be positive")
        if self.variant == "prior" and not self.prior_scale > 0:
            raise DataError("prior_scale must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class TrainedModel:
    """Everything needed to reproduce predictions without refitting.

    Targets are stored standardized; ``y_mean`` and ``y_scale`` map
    predictions back to the original units.
    """

    hypers: gp.GpHyperparams
    head: MaskHead
    kernel: str
    cholesky: np.ndarray
    train_features: np.ndarray
    train_targets: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    n_positions: int = 0
    jitter_used: float = 0.0
    objective: float = float("nan")
    trace: list = field(default_factory=list)
    restricted: bool = False
    config: dict = field(default_factory=dict)

    @property
    def n_dims(self):
        return self.train_features.shape[1]

    @property
    def n_train(self):
        return self.train_features.shape[0]

    def pool(self, tensor):
        values = np.asarray(getattr(tensor, "values", tensor), dtype=np.float64)
        if values.ndim != 3:
            raise ShapeMismatchError(f"expected an (N, P, M) tensor, got shape {values.shape}")
        if values.shape[1] != self.n_positions or values.shape[2] != self.n_dims:
            raise ShapeMismatchError(
                f"tensor has P={values.shape[1]}, M={values.shape[2]}; "
                f"model expects P={self.n_positions}, M={self.n_dims}"
            )
        return pool(values, self.head)

    def predict_features(self, Z, full_cov=False):
        """Predictive distribution in target units for already-pooled features."""
        dist = gp.predictive(self.train_features, self.train_targets, self.cholesky, Z,
                             self.hypers, self.kernel, full_cov)
        scale2 = self.y_scale**2
        return gp.PredictiveDistribution(
            dist.mean * self.y_scale + self.y_mean,
            dist.variance * scale2,
            None if dist.covariance is None else dist.covariance * scale2,
        )

    def predict(self, tensor, full_cov=False):
        return self.predict_features(self.pool(tensor), full_cov)

    @property
    def signal_variance(self):
        """Prior variance in target units."""
        return self.hypers.signal_variance * self.y_scale**2

    def consistency_error(self):
        """Max deviation between the stored factor and a fresh factorization."""
        K = gp.kernel_matrix(self.train_features, self.hypers, self.kernel).K
        n = K.shape[0]
        C = K + (self.hypers.noise_variance + self.jitter_used) * np.eye(n)
        return float(np.max(np.abs(self.cholesky @ self.cholesky.T - C)))


def _as_values(tensor):
    values = np.asarray(getattr(tensor, "values", tensor), dtype=np.float64)
    if values.ndim != 3:
        raise ShapeMismatchError(f"expected an (N, P, M) tensor, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("tensor contains non-finite values")
    return values


def objective(tensor, y, hp, head, config=None):
    """Training objective: log marginal likelihood, plus the Half-Cauchy
    log-prior for the prior head."""
    kernel = config.kernel if config is not None else gp.DEFAULT_KERNEL
    value = gp.log_marginal_likelihood(pool(tensor, head), y, hp, kernel)
    if head.variant == "prior":
        value += half_cauchy_log_prior(head)[0]
    return value


class _Problem:
    """Flat parameter vector view ``[log hypers (3), raw mask (P)]``."""

    def __init__(self, values, y, config, base_head):
        self.values = values
        self.y = y
        self.config = config
        self.base_head = base_head
        self.learn_mask = base_head.trainable and not config.freeze_mask

    def unpack(self, theta):
        hp = gp.GpHyperparams.from_array(theta[:3])
        head = self.base_head.with_params(theta[3:]) if self.learn_mask else self.base_head
        return hp, head

    def pack(self, hp, head):
        if self.learn_mask:
            return np.concatenate([hp.to_array(), head.raw_params])
        return hp.to_array()

    def __call__(self, theta):
        hp, head = self.unpack(theta)
        lml, g_hyp, g_mask = gp.mll_gradients(self.values, head, self.y, hp, self.config.kernel)
        if head.variant == "prior":
            lp, g_lp = half_cauchy_log_prior(head)
            lml += lp
            g_mask = g_mask + g_lp
        grad = np.concatenate([g_hyp, g_mask]) if self.learn_mask else g_hyp
        return lml, grad


def _ascend(problem, theta, config):
    """First-order ascent with Adam-style per-parameter scaling and backtracking.

    Steps are only accepted if the objective does not decrease.
    """
    f, grad = problem(theta)
    if not np.isfinite(f):
        raise ConditioningError("non-finite objective at initialization")
    trace = [(0, f, float(np.linalg.norm(grad)))]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr = config.learning_rate
    max_lr = 10.0 * config.learning_rate
    streak = 0
    for it in range(1, config.max_iters + 1):
        if config.step_rule == "adaptive":
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad**2
            direction = (m / (1 - beta1**it)) / (np.sqrt(v / (1 - beta2**it)) + eps)
        else:
            direction = grad
        step = lr
        accepted = None
        for attempt in range(60):
            candidate = theta + step * direction
            try:
                f_new, g_new = problem(candidate)
            except (ConditioningError, FloatingPointError, DataError):
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f:
                accepted = candidate
                break
            if attempt == 0 and config.step_rule == "adaptive":
                # stale momentum: restart from the current gradient, whose
                # scaled direction is guaranteed to ascend for small steps
                m = (1 - beta1**it) * grad
                v = (1 - beta2**it) * grad**2
                direction = grad / (np.abs(grad) + eps)
            step *= 0.5
        if accepted is None:
            break
        if config.step_rule == "adaptive":
            lr = min(step * 1.2, max_lr)
        change = abs(f_new - f) / max(abs(f), 1.0)
        theta, f, grad = accepted, f_new, g_new
        trace.append((it, f, float(np.linalg.norm(grad))))
        streak = streak + 1 if change < config.tolerance else 0
        if streak >= config.patience:
            break
    return theta, f, trace


def _standardize(y, enabled):
    if not enabled:
        return y.copy(), 0.0, 1.0
    mean = float(np.mean(y))
    scale = float(np.std(y))
    if not scale > 0:
        scale = 1.0
    return (y - mean) / scale, mean, scale


def _initial_theta(problem, values, y_std, restart, init_hypers=None):
    config = problem.config
    rng = np.random.default_rng([config.seed, restart])
    perturb = rng.normal(0.0, 0.5, size=3)
    raw = 0.01 * rng.standard_normal(values.shape[1])
    if config.freeze_mask:
        raw = np.zeros(values.shape[1])
    head = problem.base_head.with_params(raw) if problem.base_head.trainable else problem.base_head
    X = pool(values, head)
    dists = gp.cdist(X, X)[np.triu_indices(X.shape[0], k=1)]
    dists = dists[dists > 0]
    length = float(np.median(dists)) if dists.size else 1.0
    var = float(np.var(y_std))
    if not var > 0:
        var = 1.0
    hp = gp.GpHyperparams.from_values(var, length, 0.1 * var)
    if init_hypers is not None:
        hp = init_hypers
    if restart > 0:
        hp = gp.GpHyperparams.from_array(hp.to_array() + perturb)
    return hp, head


def _run_restart(values, y_std, config, restart, init_hypers=None):
    base = MaskHead.initial(config.variant, values.shape[1], prior_scale=config.prior_scale)
    problem = _Problem(values, y_std, config, base)
    hp, head = _initial_theta(problem, values, y_std, restart, init_hypers)
    problem.base_head = head
    theta, f, trace = _ascend(problem, problem.pack(hp, head), config)
    hp, head = problem.unpack(theta)
    return hp, head, f, trace


def fit(tensor, y, config=None, init_hypers=None):
    """Fit hyperparameters (and mask) from ``config.restarts`` seeded starts.

    The restart with the best final objective wins, ties going to the lowest
    index. ``init_hypers`` replaces the heuristic starting point (in the
    standardized target scale when ``config.standardize`` is set); later
    restarts perturb it.
    """
    config = config or TrainConfig()
    values = _as_values(tensor)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != values.shape[0]:
        raise ShapeMismatchError(f"{y.size} targets for {values.shape[0]} sequences")
    if values.shape[0] < 2:
        raise DataError("need at least 2 training sequences")
    if not np.all(np.isfinite(y)):
        raise DataError("targets must be finite")
    y_std, y_mean, y_scale = _standardize(y, config.standardize)

    def attempt(restart):
        try:
            return _run_restart(values, y_std, config, restart, init_hypers)
        except ConditioningError as exc:
            return exc

    restarts = range(config.restarts)
    if config.threads > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool_:
            results = list(pool_.map(attempt, restarts))
    else:
        results = [attempt(r) for r in restarts]

    best = None
    diagnostics = []
    for r, res in enumerate(results):
        if isinstance(res, Exception):
            diagnostics.append(f"restart {r}: {res}")
            continue
        logger.debug("restart %d: objective %.6g after %d steps", r, res[2], len(res[3]) - 1)
        if best is None or res[2] > best[2]:
            best = res
    if best is None:
        raise TrainingError("all restarts failed", diagnostics)

    hp, head, f, trace = best
    X = pool(values, head)
    K = gp.kernel_matrix(X, hp, config.kernel).K
    L, jitter = gp.factorize(K, hp.noise_variance, hp.signal_variance)
    return TrainedModel(
        hypers=hp,
        head=head,
        kernel=config.kernel,
        cholesky=L,
        train_features=X,
        train_targets=y_std,
        y_mean=y_mean,
        y_scale=y_scale,
        n_positions=values.shape[1],
        jitter_used=jitter,
        objective=f,
        trace=trace,
        config=config.to_dict(),
    )


def fit_restricted(tensor, y, mutation_counts, config=None):
    """Fit on the single-mutation subset only; the model is flagged ``restricted``."""
    counts = np.asarray(mutation_counts).ravel()
    values = _as_values(tensor)
    if counts.size != values.shape[0]:
        raise ShapeMismatchError(f"{counts.size} mutation counts for {values.shape[0]} sequences")
    idx = np.flatnonzero(counts == 1)
    if idx.size < 2:
        raise DataError(f"need at least 2 single mutants, found {idx.size}")
    model = fit(values[idx], np.asarray(y, dtype=np.float64).ravel()[idx], config)
    model.restricted = True
    return model
