import math
import numpy as np
import pytest
from conftest import central_difference, flat_params, relative_error
from flowsac.bench import fit_static_target
from flowsac.errors import DimensionError, NonFiniteError
from flowsac.flow_matching import (LOG_WEIGHT_FLOOR, WeightedBatch, condot_pair, condot_regression_loss,
    draw_condot_noise, fm_loss_and_grad, importance_weights, isfm_loss_and_grad)
from flowsac.lqr import gaussian_logpdf


def test_condot_pair_endpoints():
    u1, eps = np.array([2.0, -1.0]), np.array([0.5, 0.5])
    start = condot_pair(u1, eps, 0.0)
    assert np.array_equal(start.u_tau, eps)
    assert np.array_equal(start.target_velocity, u1 - eps)
    middle = condot_pair(u1, eps, 0.5)
    assert np.allclose(middle.u_tau, [1.25, -0.25])


def test_condot_pair_rejects_tau_one():
    with pytest.raises(ValueError):
        condot_pair(np.zeros(1), np.zeros(1), 1.0)


def test_condot_pair_batched_tau():
    u1 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    pair = condot_pair(u1, eps, np.array([0.0, 0.5, 0.75]))
    assert np.allclose(pair.u_tau[:, 0], [0.0, 0.5, 0.75])


def test_importance_weights_uniform():
    assert np.allclose(importance_weights([3.0, 3.0, 3.0], [-1.0, -1.0, -1.0], 0.5), 1 / 3)


def test_importance_weights_follow_boltzmann_ratio():
    w = importance_weights([1.0, 0.0], [0.0, 0.0], 1.0)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] / w[1] == pytest.approx(math.e)
    # Lower sampling density means a larger weight
    w = importance_weights([0.0, 0.0], [-2.0, 0.0], 1.0)
    assert w[0] / w[1] == pytest.approx(math.exp(2.0))


def test_importance_weights_clamp():
    w = importance_weights([0.0, -1000.0], [0.0, 0.0], 1.0)
    assert w[1] > 0
    assert w[1] / w[0] == pytest.approx(math.exp(-LOG_WEIGHT_FLOOR))


def test_importance_weights_validation():
    with pytest.raises(DimensionError):
        importance_weights([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(NonFiniteError):
        importance_weights([np.nan], [0.0], 1.0)
    with pytest.raises(ValueError):
        importance_weights([0.0], [0.0], 0.0)


def test_weighted_batch_validation():
    with pytest.raises(ValueError):
        WeightedBatch(np.zeros(1), np.zeros((2, 1)), np.array([0.5, 0.6]))
    with pytest.raises(DimensionError):
        WeightedBatch(np.zeros(1), np.zeros((2, 1)), np.array([1.0]))
    batch = WeightedBatch.uniform(np.zeros(1), np.zeros((4, 1)))
    assert np.allclose(batch.weights, 0.25)


def test_uniform_isfm_equals_plain_flow_matching(small_net, rng):
    theta = small_net([2 + 1 + 1, 8, 1])
    x = np.array([0.3, -0.2])
    samples = rng.standard_normal((6, 1))
    batch = WeightedBatch(x, samples, np.full(6, 1 / 6))

    loss_is, grads_is = isfm_loss_and_grad(theta, batch, 4, np.random.default_rng(7))
    loss_fm, grads_fm = fm_loss_and_grad(theta, x, samples, 4, np.random.default_rng(7))
    assert loss_is == loss_fm
    assert np.array_equal(flat_params(grads_is.layers), flat_params(grads_fm.layers))


def test_batches_add_up(small_net, rng):
    theta = small_net([1 + 1 + 1, 8, 1])
    a = WeightedBatch.uniform(np.array([0.5]), rng.standard_normal((3, 1)))
    b = WeightedBatch.uniform(np.array([-1.0]), rng.standard_normal((3, 1)))

    eps, tau = draw_condot_noise(np.random.default_rng(3), 6, 2, 1)
    both, _ = condot_regression_loss(theta, np.repeat([[0.5], [-1.0]], 3, axis=0),
                                     np.concatenate([a.samples, b.samples]), np.full(6, 1 / 3), eps, tau)
    first, _ = condot_regression_loss(theta, np.full((3, 1), 0.5), a.samples, a.weights, eps[:3], tau[:3])
    second, _ = condot_regression_loss(theta, np.full((3, 1), -1.0), b.samples, b.weights, eps[3:], tau[3:])
    assert both == pytest.approx(first + second)

    loss, _ = isfm_loss_and_grad(theta, [a, b], 2, np.random.default_rng(3))
    assert loss == pytest.approx(both)


def test_perfect_velocity_has_zero_loss():
    from flowsac.autodiff_net import Layer, MlpParams
    # Samples all equal to 2 with zero noise have the constant target velocity 2
    theta = MlpParams((Layer(np.zeros((1, 2)), np.array([2.0])),))
    eps = np.zeros((3, 2, 1))
    tau = np.full((3, 2), 0.4)
    loss, grads = condot_regression_loss(theta, np.zeros((3, 0)), np.full((3, 1), 2.0), np.full(3, 1 / 3), eps, tau)
    assert loss == 0.0
    assert grads.norm() == 0.0


@pytest.mark.parametrize('trial', range(20))
def test_regression_gradient_matches_finite_differences(small_net, trial):
    rng = np.random.default_rng(100 + trial)
    theta = small_net([2 + 1 + 2, 16, 2])
    n, m = 5, 3
    x = rng.standard_normal((n, 2))
    u1 = rng.standard_normal((n, 2))
    w = rng.random(n)
    w /= w.sum()
    eps, tau = draw_condot_noise(rng, n, m, 2)

    _, grads = condot_regression_loss(theta, x, u1, w, eps, tau)
    numeric = central_difference(lambda p: condot_regression_loss(p, x, u1, w, eps, tau)[0], theta)
    assert relative_error(flat_params(grads.layers), numeric) < 1e-4


def test_noise_shapes(rng):
    eps, tau = draw_condot_noise(rng, 7, 4, 3)
    assert eps.shape == (7, 4, 3)
    assert tau.shape == (7, 4)
    assert tau.min() >= 0 and tau.max() < 1


@pytest.mark.slow
def test_static_target_is_learned():
    fit = fit_static_target(1.0, 0.25, 1.0, 1024, seed=0, steps=2000)
    assert math.sqrt(fit.w2sq) < 0.1


def test_weighted_mean_is_unbiased_for_target(rng):
    # Samples from N(0, 1) weighted towards exp(Q/alpha) = N(1, 0.25), where E[u^2] = 1.25
    alpha = 0.5
    u = rng.standard_normal(100_000)
    w = importance_weights(alpha * gaussian_logpdf(1.0, 0.25)(u), gaussian_logpdf(0.0, 1.0)(u), alpha)
    f = u ** 2
    estimate = float(w @ f)
    stderr = math.sqrt(float(np.sum(w ** 2 * (f - estimate) ** 2)))
    assert abs(estimate - 1.25) < 3 * stderr
