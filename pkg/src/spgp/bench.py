"""Planted-mask synthetic data and the split / trial / sweep evaluation protocol."""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .exceptions import DataError, SpgpError
from .io import EmbeddingTensor, SplitSpec, TargetTable
from .trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

N_AMINO_ACIDS = 20
DEFAULT_VAL_SIZE = {"one-mut-shuffle": 10, "uniform-shuffle": 24}
BASELINE = "mean"


@dataclass
class SyntheticSpec:
    """Recipe for a planted-support dataset.

    Sequences are a wild type with ``1..max_mutations`` substituted positions.
    With ``target="cosine"`` the target is a smooth random function of the
    mean embedding over ``support``; with ``target="additive"`` each
    substitution on the support adds a positive, position-specific effect.
    ``noise_frac``, when given, overrides ``noise_sd`` as a fraction of the
    noise-free target standard deviation.
    """

    n_sequences: int
    n_positions: int
    n_dims: int
    support: tuple
    function_seed: int = 0
    noise_sd: float = 0.0
    noise_frac: float | None = None
    max_mutations: int = 5
    single_fraction: float | None = None
    target: str = "cosine"
    n_features: int = 64
    tm_offset: float = 70.0
    tm_scale: float = 1.0

    def __post_init__(self):
        self.support = tuple(int(s) for s in self.support)
        if min(self.n_sequences, self.n_positions, self.n_dims) < 1:
            raise DataError("n_sequences, n_positions and n_dims must be >= 1")
        if len(self.support) < 1:
            raise DataError("support must contain at least one position")
        if len(self.support) > self.n_positions:
            raise DataError("support exceeds positions")
        if len(set(self.support)) != len(self.support):
            raise DataError("support positions must be distinct")
        if min(self.support) < 0 or max(self.support) >= self.n_positions:
            raise DataError("support position out of range")
        if self.noise_sd < 0 or (self.noise_frac is not None and self.noise_frac < 0):
            raise DataError("noise must be non-negative")
        if not 1 <= self.max_mutations <= self.n_positions:
            raise DataError("max_mutations must lie in [1, n_positions]")
        if self.single_fraction is not None and not 0 <= self.single_fraction <= 1:
            raise DataError("single_fraction must lie in [0, 1]")
        if self.target not in ("cosine", "additive"):
            raise DataError(f"unknown target kind {self.target!r}")

    @classmethod
    def planted(cls, n_sequences, n_positions, n_dims, k, seed=0, **kwargs):
        """Spec with a support of ``k`` positions drawn from ``seed``."""
        if k > n_positions:
            raise DataError("support exceeds positions")
        if k < 1:
            raise DataError("support must contain at least one position")
        rng = np.random.default_rng([seed, 1])
        support = tuple(sorted(rng.choice(n_positions, size=k, replace=False).tolist()))
        return cls(n_sequences, n_positions, n_dims, support, **kwargs)


@dataclass(eq=False)
class SyntheticData:
    tensor: EmbeddingTensor
    targets: TargetTable
    mutations: list
    spec: SyntheticSpec
    noise_sd: float
    seed: int

    def __iter__(self):
        return iter((self.tensor, self.targets))

    def metadata(self):
        return {
            "seed": self.seed,
            "support": list(self.spec.support),
            "n_sequences": self.spec.n_sequences,
            "n_positions": self.spec.n_positions,
            "n_dims": self.spec.n_dims,
            "function_seed": self.spec.function_seed,
            "target": self.spec.target,
            "noise_sd": self.noise_sd,
            "max_mutations": self.spec.max_mutations,
            "single_fraction": self.spec.single_fraction,
            "mutated_positions": [list(m) for m in self.mutations],
        }


def _mutation_counts(spec, rng):
    n = spec.n_sequences
    if spec.single_fraction is None:
        return rng.integers(1, spec.max_mutations + 1, size=n)
    n_single = int(round(spec.single_fraction * n))
    counts = np.ones(n, dtype=np.int64)
    if spec.max_mutations > 1:
        counts[n_single:] = rng.integers(2, spec.max_mutations + 1, size=n - n_single)
    return counts[rng.permutation(n)]


def generate(spec, seed=0):
    """Draw a planted-support dataset. Identical ``(spec, seed)`` gives identical output."""
    rng = np.random.default_rng([seed, 0])
    P, M = spec.n_positions, spec.n_dims
    alphabet = rng.standard_normal((N_AMINO_ACIDS, M))
    position_code = 0.5 * rng.standard_normal((P, M))
    wild_type = rng.integers(0, N_AMINO_ACIDS, size=P)

    counts = _mutation_counts(spec, rng)
    sequences = np.tile(wild_type, (spec.n_sequences, 1))
    mutations = []
    for n, c in enumerate(counts):
        positions = np.sort(rng.choice(P, size=int(c), replace=False))
        shift = rng.integers(1, N_AMINO_ACIDS, size=positions.size)
        sequences[n, positions] = (wild_type[positions] + shift) % N_AMINO_ACIDS
        mutations.append(tuple(int(p) for p in positions))
    values = alphabet[sequences] + position_code[None, :, :]

    support = np.array(spec.support)
    frng = np.random.default_rng([spec.function_seed, 2])
    if spec.target == "cosine":
        summary = values[:, support, :].mean(axis=1)
        # unit-ish frequency relative to the spread of the support summary
        spread = np.sqrt(2.0 / len(support))
        omega = frng.standard_normal((spec.n_features, M)) / spread
        phase = frng.uniform(0.0, 2.0 * np.pi, size=spec.n_features)
        amp = frng.standard_normal(spec.n_features) * np.sqrt(2.0 / spec.n_features)
        clean = np.cos(summary @ omega.T + phase) @ amp
    else:
        # positive per-substitution effects in [0.5, 1.5], a smooth function of
        # the embedding change so that single mutants carry learnable signal
        direction = frng.standard_normal(M) / np.sqrt(2.0 * M)
        delta = alphabet[None, :, :] - alphabet[wild_type][:, None, :]
        effects = np.zeros((P, N_AMINO_ACIDS))
        effects[support] = 1.0 + 0.5 * np.tanh(delta[support] @ direction)
        mutated = sequences != wild_type[None, :]
        clean = (effects[np.arange(P)[None, :], sequences] * mutated).sum(axis=1)
    clean = spec.tm_offset + spec.tm_scale * clean

    noise_sd = spec.noise_sd
    if spec.noise_frac is not None:
        noise_sd = spec.noise_frac * float(np.std(clean))
    y = clean + noise_sd * rng.standard_normal(spec.n_sequences) if noise_sd > 0 else clean
    ids = [f"seq{n:05d}" for n in range(spec.n_sequences)]
    targets = TargetTable(ids, y, counts)
    return SyntheticData(EmbeddingTensor(values), targets, mutations, spec, float(noise_sd), seed)


def holdout_indices(n, test_size, seed):
    """Fixed test set for a dataset: ``test_size`` indices drawn once from ``seed``."""
    if not 0 <= test_size < n:
        raise DataError(f"test size {test_size} must be smaller than {n} samples")
    rng = np.random.default_rng([seed, 3])
    return np.sort(rng.choice(n, size=test_size, replace=False))


def make_split(table, kind, seed, val_size=None, test_indices=None):
    """Train / validation / test partition.

    ``one-mut-shuffle`` draws the validation set from single mutants only,
    ``uniform-shuffle`` from every non-test sample; ``holdout`` trains on
    everything outside ``test_indices`` and has no validation set.
    """
    n = len(table)
    test = np.sort(np.asarray([] if test_indices is None else test_indices, dtype=np.int64))
    if test.size and (test.min() < 0 or test.max() >= n):
        raise DataError("test indices out of range")
    pool = np.setdiff1d(np.arange(n), test)
    if kind == "holdout":
        if test.size == 0:
            raise DataError("holdout split needs an explicit test index set")
        return SplitSpec(pool, [], test, kind, seed)
    if kind not in DEFAULT_VAL_SIZE:
        raise DataError(f"cannot generate a split of kind {kind!r}")
    val_size = DEFAULT_VAL_SIZE[kind] if val_size is None else int(val_size)
    if val_size < 1:
        raise DataError("val_size must be >= 1")
    candidates = pool
    if kind == "one-mut-shuffle":
        candidates = pool[np.asarray(table.mutation_count)[pool] == 1]
        if candidates.size == 0:
            raise DataError("no single mutants available for a 1-MUT split")
    if val_size >= candidates.size or val_size >= pool.size:
        raise DataError(
            f"validation size {val_size} must be smaller than the available pool ({candidates.size})"
        )
    rng = np.random.default_rng([seed, 4])
    validation = np.sort(rng.choice(candidates, size=val_size, replace=False))
    train = np.setdiff1d(pool, validation)
    return SplitSpec(train, validation, test, kind, seed)


def mae(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError("prediction and truth lengths differ")
    return float(np.mean(np.abs(pred - truth)))


def paired_ttest(a, b):
    """Two-sided paired t-test of ``a - b``.

    Returns ``(t, p, degenerate)``; all-zero differences give ``(0, 1, True)``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        return float("nan"), float("nan"), True
    sd = np.std(d, ddof=1)
    mean = np.mean(d)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0, True
        return float(np.copysign(np.inf, mean)), 0.0, True
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return float(t), float(p), False


@dataclass
class TrialReport:
    methods: list
    split_kind: str
    n_trials: int
    base_seed: int
    rows: list = field(default_factory=list)  # (method, trial, split_seed, mae)
    failures: list = field(default_factory=list)  # (method, trial, message)
    summary: dict = field(default_factory=dict)

    def mae_table(self):
        """``{method: {trial: mae}}`` over successful trials."""
        table = {m: {} for m in self.methods}
        for method, trial, _, value in self.rows:
            table[method][trial] = value
        return table

    @property
    def effective_trials(self):
        return len({t for _, t, _, _ in self.rows} - {t for _, t, _ in self.failures})

    @property
    def success_fraction(self):
        return self.effective_trials / self.n_trials if self.n_trials else 0.0

    def summarize(self, baseline=BASELINE):
        table = self.mae_table()
        failed = {t for _, t, _ in self.failures}
        summary = {}
        base = table.get(baseline, {})
        for method in self.methods:
            trials = sorted(set(table[method]) - failed)
            values = np.array([table[method][t] for t in trials])
            entry = {
                "n": int(values.size),
                "mean": float(values.mean()) if values.size else None,
                "std": float(values.std(ddof=1)) if values.size > 1 else None,
            }
            if method != baseline and baseline in table:
                paired = [t for t in trials if t in base]
                t_stat, p, degenerate = paired_ttest(
                    [table[method][t] for t in paired], [base[t] for t in paired]
                )
                entry.update(t=t_stat, p_value=p, degenerate=degenerate,
                             significant=bool(not degenerate and p < 0.05))
            summary[method] = entry
        self.summary = summary
        return summary

    def to_json(self):
        return {
            "split_kind": self.split_kind,
            "methods": list(self.methods),
            "n_trials": self.n_trials,
            "effective_trials": self.effective_trials,
            "base_seed": self.base_seed,
            "summary": self.summary or self.summarize(),
            "failures": [list(f) for f in self.failures],
            "significance": "paired two-sided t-test on per-trial MAE vs baseline, p < 0.05",
            "targets_standardized": True,
        }


def _trial(tensor, targets, split_kind, methods, trial, base_seed, test_indices, config,
           val_size):
    seed = base_seed + trial
    split = make_split(targets, split_kind, seed, val_size, test_indices)
    eval_idx = split.test if split_kind == "holdout" else split.validation
    rows, failures = [], []
    for method in methods:
        cfg = replace(config, variant=method, seed=seed)
        try:
            model = fit(tensor.values[split.train], targets.values[split.train], cfg)
            dist = model.predict(tensor.values[eval_idx])
        except SpgpError as exc:
            failures.append((method, trial, str(exc)))
            continue
        rows.append((method, trial, seed, mae(dist.mean, targets.values[eval_idx])))
    return rows, failures


def run_trials(data, split_kind, methods, n_trials, base_seed=0, test_indices=None,
               config=None, val_size=None, threads=1):
    """Refit every method on ``n_trials`` reshuffled splits and collect MAE.

    Trial ``t`` uses split seed and optimizer seed ``base_seed + t``. The
    evaluation set is the validation set for shuffle splits and the fixed
    test set for ``holdout``.
    """
    if n_trials < 2:
        raise DataError("need at least 2 trials")
    tensor, targets = data
    methods = list(dict.fromkeys(methods))
    config = config or TrainConfig()

    def work(t):
        return _trial(tensor, targets, split_kind, methods, t, base_seed, test_indices, config,
                      val_size)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, range(n_trials)))
    else:
        results = [work(t) for t in range(n_trials)]

    report = TrialReport(methods, split_kind, n_trials, base_seed)
    for rows, failures in results:
        report.rows.extend(rows)
        report.failures.extend(failures)
    report.rows.sort(key=lambda r: (r[1], methods.index(r[0])))
    report.summarize()
    return report


def sweep_prior(data, split_kind, sigmas, n_trials, base_seed=0, test_indices=None,
                config=None, val_size=None, threads=1):
    """Mean and std MAE of the prior head for each scale; returns ``(rows, best_sigma)``."""
    if len(sigmas) == 0:
        raise DataError("empty sigma list")
    unique = list(dict.fromkeys(float(s) for s in sigmas))
    if len(unique) != len(sigmas):
        warnings.warn("duplicate sigma values removed from sweep", stacklevel=2)
    if any(not s > 0 for s in unique):
        raise DataError("sigma values must be positive")
    config = config or TrainConfig()
    rows = []
    for sigma in unique:
        report = run_trials(data, split_kind, ["prior"], n_trials, base_seed, test_indices,
                            replace(config, prior_scale=sigma), val_size, threads)
        entry = report.summary["prior"]
        rows.append({"sigma": sigma, "mean": entry["mean"], "std": entry["std"], "n": entry["n"]})
    scored = [r for r in rows if r["mean"] is not None]
    best = min(scored, key=lambda r: r["mean"])["sigma"] if scored else None
    return rows, best
