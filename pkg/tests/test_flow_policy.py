import math
import numpy as np
import pytest
import scipy.integrate
import scipy.stats
from flowsac.autodiff_net import Layer, MlpParams, init_mlp, mlp_forward
from flowsac.errors import DimensionError
from flowsac.flow_policy import (FlowPolicy, GaussianPathFlow, entropy_estimate, log_prob_of_sample, push_forward,
    sample_action, velocity_inputs)


def gaussian_log_error(flow, u0, x=None):
    x = np.zeros((len(u0), flow.state_dim)) if x is None else x
    sample = sample_action(flow, x, u0)
    exact = scipy.stats.multivariate_normal(flow.mean, flow.cov).logpdf(sample.u1)
    return np.abs(np.atleast_1d(sample.log_prob - exact))


@pytest.fixture
def flow_1d():
    return GaussianPathFlow(np.array([1.0]), np.array([[0.25]]), ode_steps=64)


@pytest.fixture
def flow_2d():
    return GaussianPathFlow(np.array([0.5, -1.0]), np.array([[2.0, 0.6], [0.6, 0.5]]), ode_steps=64)


def test_exact_flow_log_prob_1d(flow_1d, rng):
    assert gaussian_log_error(flow_1d, rng.standard_normal((50, 1))).max() < 1e-3


def test_exact_flow_log_prob_2d(flow_2d, rng):
    assert gaussian_log_error(flow_2d, rng.standard_normal((50, 2))).max() < 1e-3


def test_exact_flow_moments(flow_2d, rng):
    u = push_forward(flow_2d, np.zeros((20000, 0)), rng.standard_normal((20000, 2)))
    assert np.allclose(u.mean(axis=0), flow_2d.mean, atol=0.05)
    assert np.allclose(np.cov(u, rowvar=False), flow_2d.cov, atol=0.08)


def test_log_prob_error_is_second_order(flow_1d):
    u0 = np.array([[-1.5], [-0.4], [0.3], [1.1], [2.0]])
    errors = [gaussian_log_error(flow_1d.with_ode_steps(n), u0).max() for n in (16, 32, 64)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 0.15 <= fine / coarse <= 0.45


def test_density_integrates_to_one(flow_1d):
    u0 = np.linspace(-6, 6, 4001).reshape(-1, 1)
    sample = sample_action(flow_1d, np.zeros((len(u0), 0)), u0)
    mass = scipy.integrate.trapezoid(np.exp(sample.log_prob), sample.u1[:, 0])
    assert mass == pytest.approx(1.0, abs=0.02)


def test_state_dependent_mean():
    flow = GaussianPathFlow(np.zeros(1), np.eye(1), gain=np.array([[0.5, 1.0]]))
    x = np.array([[2.0, -1.0]])
    assert flow.state_dim == 2
    assert np.allclose(flow.target_mean(x), [[0.0]])
    assert np.allclose(flow.target_mean(np.array([[2.0, 0.0]])), [[-1.0]])


def test_single_row_sample(flow_1d):
    sample = sample_action(flow_1d, np.zeros(0), np.array([0.0]))
    assert sample.u1.shape == (1,)
    assert isinstance(sample.log_prob, float)
    assert sample.path_nodes[0][0] == 0.0 and sample.path_nodes[-1][0] == pytest.approx(1.0)
    assert len(sample.path_nodes) == 65


def test_recomputed_log_prob_is_bitwise_equal(rng):
    net = init_mlp([2 + 1 + 2, 16, 2], rng, final_scale=1.0)
    policy = FlowPolicy(net, 2, 2, ode_steps=8)
    x = rng.standard_normal((4, 2))
    sample = sample_action(policy, x, rng.standard_normal((4, 2)))
    assert np.array_equal(log_prob_of_sample(policy, x, sample), sample.log_prob)


def test_divergence_matches_finite_differences(rng):
    net = init_mlp([1 + 1 + 3, 16, 3], rng, final_scale=1.0)
    policy = FlowPolicy(net, 1, 3)
    x = rng.standard_normal((5, 1))
    u = rng.standard_normal((5, 3))
    h = 1e-6
    trace = np.zeros(5)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        trace += (policy.velocity(x, 0.3, u + e)[:, j] - policy.velocity(x, 0.3, u - e)[:, j]) / (2 * h)
    assert np.allclose(policy.divergence(x, 0.3, u), trace, atol=1e-7)


def test_constant_field_translates_noise(rng):
    shift = np.array([0.7, -1.3])
    net = MlpParams((Layer(np.zeros((2, 2 + 1 + 2)), shift),))
    policy = FlowPolicy(net, 2, 2, ode_steps=16)
    u0 = rng.standard_normal((10, 2))
    sample = sample_action(policy, rng.standard_normal((10, 2)), u0)
    assert np.allclose(sample.u1, u0 + shift, atol=1e-12)
    assert np.allclose(sample.log_prob, scipy.stats.norm.logpdf(u0).sum(axis=1), atol=1e-12)


def test_velocity_inputs_layout():
    rows = velocity_inputs(np.array([[1.0, 2.0]]), 0.25, np.array([[3.0]]))
    assert np.array_equal(rows, [[1.0, 2.0, 0.25, 3.0]])


def test_fresh_policy_is_close_to_standard_normal(rng):
    policy = FlowPolicy(init_mlp([2 + 1 + 2, 64, 64, 2], rng), 2, 2)
    u0 = rng.standard_normal((1000, 2))
    u1 = push_forward(policy, np.zeros(2), u0)
    assert np.max(np.abs(u1 - u0)) < 0.1
    entropy, stderr = entropy_estimate(policy, np.zeros(2), 2000, rng)
    assert entropy == pytest.approx(math.log(2 * math.pi * math.e), abs=0.15)
    assert stderr > 0


def test_entropy_of_exact_flow(flow_2d, rng):
    entropy, stderr = entropy_estimate(flow_2d, np.zeros(0), 4000, rng)
    exact = 0.5 * math.log(np.linalg.det(2 * math.pi * math.e * flow_2d.cov))
    assert entropy == pytest.approx(exact, abs=4 * stderr + 1e-3)


def test_dimension_checks(rng):
    net = init_mlp([1 + 1 + 2, 8, 2], rng)
    with pytest.raises(DimensionError):
        FlowPolicy(net, 2, 2)
    policy = FlowPolicy(net, 1, 2)
    with pytest.raises(DimensionError):
        sample_action(policy, np.zeros((3, 1)), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        sample_action(policy, np.zeros((3, 1)), np.zeros((2, 2)))
    assert mlp_forward(net, np.zeros(4)).shape == (2,)
