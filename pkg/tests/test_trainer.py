import numpy as np
import pytest

from conftest import central_diff, rel_err
from spgp import bench, gp, io, trainer
from spgp.exceptions import DataError, TrainingError
from spgp.pooling import MaskHead, half_cauchy_log_prior, pool


def _instance(seed, variant):
    rng = np.random.default_rng(seed)
    N, P, M = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    tensor = rng.normal(size=(N, P, M))
    y = rng.normal(size=N)
    head = MaskHead(variant, rng.normal(size=P)) if variant != "mean" else MaskHead("mean")
    hp = gp.GpHyperparams.from_array(rng.normal(0, 0.5, size=3))
    return tensor, y, hp, head


def test_mean_objective_is_lml(rng):
    tensor, y, hp, head = _instance(1, "mean")
    assert trainer.objective(tensor, y, hp, head) == gp.log_marginal_likelihood(
        pool(tensor, head), y, hp)


def test_prior_objective_is_additive():
    tensor, y, hp, head = _instance(2, "prior")
    head = MaskHead("prior", head.raw_params, prior_scale=0.15)
    total = trainer.objective(tensor, y, hp, head)
    parts = gp.log_marginal_likelihood(pool(tensor, head), y, hp) + half_cauchy_log_prior(head)[0]
    assert total == pytest.approx(parts, abs=1e-12)


def test_prior_term_decreases_in_weight():
    grid = np.linspace(-5, 5, 201)
    values = [half_cauchy_log_prior(MaskHead("prior", [r], prior_scale=0.15))[0] for r in grid]
    assert np.all(np.diff(values) < 0)


@pytest.mark.parametrize("variant", ["mean", "softmax", "sigmoid", "prior"])
@pytest.mark.parametrize("seed", range(6))
def test_objective_gradient_matches_finite_differences(variant, seed):
    tensor, y, hp, head = _instance(seed, variant)
    config = trainer.TrainConfig(variant=variant)
    problem = trainer._Problem(tensor, y, config, head)
    theta = problem.pack(hp, head)
    f, grad = problem(theta)
    assert f == pytest.approx(trainer.objective(tensor, y, hp, head), abs=1e-12)
    numeric = central_diff(lambda t: problem(t)[0], theta)
    assert rel_err(grad, numeric) <= 1e-5


def test_fit_ascends_and_is_monotone(rng):
    tensor, y = rng.normal(size=(5, 4, 2)), rng.normal(size=5)
    model = trainer.fit(tensor, y, trainer.TrainConfig(restarts=1))
    objectives = [f for _, f, _ in model.trace]
    assert objectives[-1] >= objectives[0]
    assert np.all(np.diff(objectives) >= 0)
    assert model.consistency_error() <= 1e-10


def test_fit_self_consistency_warm_start():
    # targets drawn from the model's own prior; spread-out inputs make the
    # kernel hyperparameters identifiable
    n = 400
    truth = gp.GpHyperparams.from_values(1.0, 1.0, 1e-4)
    X = np.arange(n, dtype=np.float64).reshape(n, 1, 1)
    C = gp.kernel_matrix(X[:, 0, :], truth).K + truth.noise_variance * np.eye(n)
    estimates = []
    for seed in range(5):
        y = np.linalg.cholesky(C) @ np.random.default_rng(seed).normal(size=n)
        model = trainer.fit(X, y, trainer.TrainConfig(restarts=1, standardize=False),
                            init_hypers=truth)
        assert model.objective >= model.trace[0][1]
        estimates.append([model.hypers.signal_variance, model.hypers.length_scale])
    median = np.median(estimates, axis=0)
    np.testing.assert_allclose(median, [1.0, 1.0], rtol=0.10)


@pytest.mark.parametrize("variant", ["mean", "prior"])
def test_fit_deterministic(variant, rng):
    tensor, y = rng.normal(size=(8, 5, 2)), rng.normal(70, 1, size=8)
    cfg = trainer.TrainConfig(variant=variant, restarts=3, max_iters=80, seed=4)
    a, b = trainer.fit(tensor, y, cfg), trainer.fit(tensor, y, cfg)
    assert io.model_to_bytes(a) == io.model_to_bytes(b)
    threaded = trainer.fit(tensor, y, trainer.TrainConfig(**{**cfg.to_dict(), "threads": 3}))
    assert threaded.hypers == a.hypers
    assert threaded.cholesky.tobytes() == a.cholesky.tobytes()


def test_frozen_softmax_reduces_to_mean(planted):
    tensor, targets = planted
    X, y = tensor.values[:40], targets.values[:40]
    base = trainer.fit(X, y, trainer.TrainConfig(variant="mean", restarts=2, seed=1))
    frozen = trainer.fit(X, y, trainer.TrainConfig(variant="softmax", freeze_mask=True,
                                                  restarts=2, seed=1))
    np.testing.assert_allclose(frozen.hypers.to_array(), base.hypers.to_array(), atol=1e-8)


def test_fit_errors(rng):
    with pytest.raises(DataError):
        trainer.fit(rng.normal(size=(1, 3, 2)), [1.0])
    with pytest.raises(DataError):
        trainer.TrainConfig(max_iters=0)
    with pytest.raises(DataError):
        trainer.TrainConfig(tolerance=0)


def test_all_restarts_failing_raises(rng, monkeypatch):
    def boom(*args, **kwargs):
        raise trainer.ConditioningError("singular")

    monkeypatch.setattr(trainer, "_run_restart", boom)
    with pytest.raises(TrainingError) as info:
        trainer.fit(rng.normal(size=(4, 3, 2)), rng.normal(size=4),
                    trainer.TrainConfig(restarts=2))
    assert len(info.value.diagnostics) == 2


def _additive(seed, n=140, positions=20):
    spec = bench.SyntheticSpec(n, positions, 8, tuple(range(positions)), function_seed=seed,
                               noise_frac=0.05, max_mutations=2, single_fraction=100 / n,
                               target="additive")
    return bench.generate(spec, seed=seed)


def test_fit_restricted_uses_single_mutants_only():
    data = _additive(0)
    counts = data.targets.mutation_count
    idx = np.flatnonzero(counts == 1)[:80]
    extra = np.flatnonzero(counts == 2)[:30]
    sel = np.concatenate([idx, extra])
    model = trainer.fit_restricted(data.tensor.values[sel], data.targets.values[sel], counts[sel],
                                   trainer.TrainConfig(restarts=1, max_iters=100))
    assert model.restricted
    assert model.n_train == 80
    with pytest.raises(DataError):
        trainer.fit_restricted(data.tensor.values[extra], data.targets.values[extra],
                               counts[extra])


def test_restricted_model_underestimates_doubles():
    data = _additive(1)
    counts, y = data.targets.mutation_count, data.targets.values
    singles, doubles = np.flatnonzero(counts == 1), np.flatnonzero(counts == 2)
    model = trainer.fit_restricted(data.tensor.values[singles[:80]], y[singles[:80]],
                                   counts[singles[:80]], trainer.TrainConfig(restarts=2))
    pred = model.predict(data.tensor.values[doubles])
    assert np.mean(pred.mean < y[doubles]) >= 0.8
