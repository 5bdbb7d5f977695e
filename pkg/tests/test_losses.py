import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_task
from metacal.calibration import FunctionCdf, GaussianCdf, adapt
from metacal.data import TaskDataset
from metacal.losses import (
    ECE_LEVELS,
    EvalReport,
    calibration_loss,
    coverage,
    ece,
    evaluate_task,
    regression_loss,
    total_error,
    total_loss,
)
from metacal.numerics import DomainError, Tape


def test_regression_loss_examples():
    y = np.array([0.3, -1.0, 2.0])
    assert regression_loss(y, y) == 0.0
    assert regression_loss(y + 1.0, y) == 1.0
    assert regression_loss(np.array([0.0, 2.0]), np.array([1.0, 0.0])) == 2.5


def test_regression_loss_errors():
    with pytest.raises(DomainError):
        regression_loss(np.array([]), np.array([]))
    with pytest.raises(DomainError):
        regression_loss(np.array([1.0, 2.0]), np.array([1.0]))


@pytest.mark.parametrize("n", [1, 2, 7, 30])
def test_calibration_loss_grid_and_ones(n):
    assert calibration_loss(np.arange(1, n + 1) / n) == pytest.approx(0.0, abs=1e-15)
    assert calibration_loss(np.ones(n)) == pytest.approx((n - 1) / (2 * n), abs=1e-15)


def test_calibration_loss_hand_case():
    assert calibration_loss(np.array([0.5, 0.5])) == 0.25


def test_calibration_loss_rejects_out_of_range():
    for bad in ([1.2], [-0.1, 0.5], [np.nan], []):
        with pytest.raises(DomainError):
            calibration_loss(np.array(bad, dtype=float))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.randoms())
def test_calibration_loss_permutation_invariant(values, rnd):
    v = np.array(values)
    w = v.copy()
    rnd.shuffle(w)
    assert calibration_loss(v) == calibration_loss(w)
    assert calibration_loss(v) >= 0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_calibration_loss_zero_only_on_grid(values):
    v = np.array(values)
    grid = np.arange(1, v.size + 1) / v.size
    assert (calibration_loss(v) == 0) == bool(np.all(np.sort(v) == grid))


def test_calibration_loss_gradient_uses_fixed_permutation():
    tape = Tape()
    x = tape.variable(np.array([0.9, 0.1, 0.4]))
    (g,) = tape.backward(calibration_loss(x), [x])
    # sorted: 0.1->1/3 (below), 0.4->2/3 (below), 0.9->1 (below)
    np.testing.assert_allclose(g, [-1 / 3, -1 / 3, -1 / 3])
    tape = Tape()
    x = tape.variable(np.array([0.9, 0.5, 0.1]))
    (g,) = tape.backward(calibration_loss(x), [x])
    np.testing.assert_allclose(g, [-1 / 3, -1 / 3, -1 / 3])
    tape = Tape()
    x = tape.variable(np.array([0.9, 0.6]))
    (g,) = tape.backward(calibration_loss(x), [x])
    # sorted: 0.6 above 1/2, 0.9 below 1
    np.testing.assert_allclose(g, [-0.5, 0.5])


def test_total_loss_examples():
    assert total_loss(0.2, 0.1, 1.0) == 0.2
    assert total_loss(0.2, 0.1, 0.0) == 0.1
    assert total_loss(0.2, 0.1, 0.5) == pytest.approx(0.15, abs=1e-15)
    for lam in (-0.1, 1.1):
        with pytest.raises(DomainError):
            total_loss(0.2, 0.1, lam)


def test_total_error():
    assert total_error(0.2, 0.1) == pytest.approx(0.15, abs=1e-15)
    assert total_error(0.0, 0.0) == 0.0


def test_ece_all_quantiles_at_minus_infinity():
    cdf = FunctionCdf(lambda y: np.ones_like(y), np.zeros(4), np.ones(4))
    assert ece(cdf, np.zeros(4)) == pytest.approx(0.5, abs=1e-15)


def test_ece_single_point_below_every_quantile():
    assert ece(GaussianCdf([0.0], [1.0]), np.array([-50.0])) == pytest.approx(0.5, abs=1e-15)
    assert ece(GaussianCdf([0.0], [1.0]), np.array([50.0])) == pytest.approx(0.5, abs=1e-15)


def test_ece_rejects_empty_query():
    with pytest.raises(DomainError):
        ece(GaussianCdf(np.zeros(0), np.zeros(0)), np.zeros(0))


def test_ece_of_true_cdf_is_small():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=2000)
    mean, var = np.sin(x), 0.1 + 0.05 * x**2
    y = mean + np.sqrt(var) * rng.normal(size=x.size)
    assert ece(GaussianCdf(mean, var), y) < 0.02


def test_coverage_matches_nominal_levels_for_true_cdf():
    rng = np.random.default_rng(1)
    mean = rng.normal(size=5000)
    var = rng.uniform(0.1, 2.0, size=5000)
    y = mean + np.sqrt(var) * rng.normal(size=5000)
    assert np.max(np.abs(coverage(GaussianCdf(mean, var), y) - ECE_LEVELS)) < 0.02


@pytest.mark.parametrize("seed", range(5))
def test_ece_via_inversion_matches_direct_comparison(seed):
    rng = np.random.default_rng(seed)
    from metacal.model import init_params

    p = init_params(2, seed)
    support, query = make_task(rng, 8), make_task(rng, 40)
    task = adapt(p, support, query.features)
    direct = np.mean(task.cdf(query.targets)[None, :] <= ECE_LEVELS[:, None], axis=1)
    expected = float(np.mean(np.abs(ECE_LEVELS - direct)))
    assert abs(ece(task.cdf, query) - expected) < 1e-9


def test_evaluate_task_deterministic(params, rng):
    support, query = make_task(rng, 10), make_task(rng, 30)
    a = evaluate_task(params, support, query)
    b = evaluate_task(params, support, query)
    assert a == b
    mse, e = a
    assert mse >= 0 and 0 <= e <= 1


def test_eval_report():
    rep = EvalReport.from_episodes([("a", 0.2, 0.1), ("a", 0.4, 0.3), ("b", 0.0, 0.1)])
    assert rep.mse == pytest.approx(0.2) and rep.ece == pytest.approx(0.5 / 3)
    assert rep.te == (rep.mse + rep.ece) / 2
    assert rep.per_task[0] == ("a", pytest.approx(0.3), pytest.approx(0.2))
    assert rep.mse_se > 0
    perfect = EvalReport.from_episodes([("a", 0.0, 0.0)])
    assert (perfect.mse, perfect.ece, perfect.te) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        EvalReport.from_episodes([])


def test_episode_losses_batched_tape(params, rng):
    from metacal.losses import episode_losses

    tasks = [make_task(rng, 12) for _ in range(3)]
    xs = np.stack([t.features[:4] for t in tasks])
    ys = np.stack([t.targets[:4] for t in tasks])
    xq = np.stack([t.features[4:] for t in tasks])
    yq = np.stack([t.targets[4:] for t in tasks])
    plain = episode_losses(params.arrays, xs, ys, xq, yq, 0.5)
    tape = Tape()
    taped = episode_losses(params.on_tape(tape), xs, ys, xq, yq, 0.5)
    np.testing.assert_array_equal(plain, taped.value)
    for i, t in enumerate(tasks):
        single = episode_losses(params.arrays, xs[i:i + 1], ys[i:i + 1], xq[i:i + 1], yq[i:i + 1], 0.5)
        assert single[0] == pytest.approx(plain[i], abs=1e-12)
    assert np.all(np.asarray(episode_losses(params.arrays, xs, ys, xq, yq, 1.0))
                  == np.mean((adapt_means(params, tasks) - yq) ** 2, axis=1))


def adapt_means(params, tasks):
    return np.stack([adapt(params, TaskDataset("s", t.features[:4], t.targets[:4]), t.features[4:]).mean
                     for t in tasks])
