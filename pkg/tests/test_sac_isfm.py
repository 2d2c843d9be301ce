import csv
import dataclasses
import io
import numpy as np
import pytest
from conftest import central_difference, flat_params, relative_error
from flowsac import TRAIN_LOG_COLUMNS
from flowsac.autodiff_net import AdamState, Layer, MlpParams
from flowsac.errors import DimensionError, NonFiniteError, TrainingAborted
from flowsac.flow_matching import fm_loss_and_grad
from flowsac.lqr import Transition
from flowsac.sac_isfm import (ActionSamples, ReplayBuffer, SacConfig, SacState, draw_actions,
    improvement_weights, policy_eval_loss, policy_improve_loss, polyak_update, soft_bellman_target,
    spawn_streams, train, train_bandit)


def constant_critic(value: float) -> MlpParams:
    '''Q(x, u) = value for scalar states and actions'''
    return MlpParams((Layer(np.zeros((1, 2)), np.array([value])),))


def make_state(small_net, psi, psi_bar, alpha=1.0, gamma=0.9):
    theta = small_net([1 + 1 + 1, 4, 1])
    return SacState(theta, theta, psi, psi_bar, AdamState.create(theta), AdamState.create(psi), alpha, gamma)


def single_transition(r=-1.0):
    return Transition(np.array([[0.5]]), np.array([[0.1]]), np.array([r]), np.array([[0.3]]))


def tiny_config(**overrides):
    settings = dict(episodes=4, batch_size=8, n_actions=4, segment_length=3, eval_every=2, eval_trajectories=5,
                    eval_horizon=5, hidden_sizes=(8,), train_ode_steps=4, eval_ode_steps=4, mc_pairs=2,
                    critic_warmup=0)
    settings.update(overrides)
    return SacConfig(**settings)


def test_config_validation():
    with pytest.raises(ValueError):
        SacConfig(polyak_tau=0.0)
    with pytest.raises(ValueError):
        SacConfig(batch_size=0)
    with pytest.raises(ValueError):
        SacConfig(episodes=-1)
    with pytest.raises(ValueError):
        SacConfig(critic_warmup=-1)


def test_replay_buffer_evicts_oldest():
    buffer = ReplayBuffer(4, 1, 1)
    for i in range(6):
        buffer.push(Transition(np.array([float(i)]), np.zeros(1), float(i), np.array([i + 1.0])))
    assert len(buffer) == 4
    items = buffer.items()
    assert np.array_equal(items.x[:, 0], [2, 3, 4, 5])
    assert np.array_equal(items.r, [2, 3, 4, 5])
    assert np.array_equal(items.x_next[:, 0], [3, 4, 5, 6])


def test_replay_buffer_batched_push_interleaves_with_single_pushes():
    buffer = ReplayBuffer(4, 1, 1)
    buffer.push(Transition(np.array([0.0]), np.zeros(1), 0.0, np.zeros(1)))
    rows = np.arange(1.0, 4.0)[:, None]
    buffer.push(Transition(rows, np.zeros((3, 1)), rows[:, 0], rows))
    buffer.push(Transition(np.array([4.0]), np.zeros(1), 4.0, np.zeros(1)))
    assert np.array_equal(buffer.items().x[:, 0], [1, 2, 3, 4])


def test_replay_buffer_sampling(rng):
    buffer = ReplayBuffer(10, 1, 1)
    with pytest.raises(ValueError):
        buffer.sample(2, rng)
    for i in range(3):
        buffer.push(Transition(np.array([float(i)]), np.zeros(1), 0.0, np.zeros(1)))
    everything = buffer.sample(8, rng)
    assert sorted(everything.x[:, 0]) == [0.0, 1.0, 2.0]
    pair = buffer.sample(2, rng)
    assert len(set(pair.x[:, 0])) == 2


def test_replay_buffer_rejects_wrong_shape():
    buffer = ReplayBuffer(4, 2, 1)
    with pytest.raises(DimensionError):
        buffer.push(Transition(np.zeros(1), np.zeros(1), 0.0, np.zeros(1)))


def test_critic_loss_of_constant_networks(small_net):
    # target = -1 + 0.9 * (2 - 0) = 0.8, Q = -1.4
    state = make_state(small_net, constant_critic(-1.4), constant_critic(2.0))
    samples = ActionSamples(np.zeros((1, 2, 1)), np.zeros((1, 2)))
    batch = single_transition()

    assert soft_bellman_target(state, batch, samples) == pytest.approx([0.8])
    loss, grads = policy_eval_loss(state, batch, samples)
    assert loss == pytest.approx(4.84)
    assert grads.layers[0].bias[0] == pytest.approx(-4.4)
    assert np.allclose(grads.layers[0].weight, [[-2.2, -0.44]])


def test_critic_loss_vanishes_at_the_target(small_net):
    state = make_state(small_net, constant_critic(0.8), constant_critic(2.0))
    samples = ActionSamples(np.zeros((1, 2, 1)), np.zeros((1, 2)))
    loss, grads = policy_eval_loss(state, single_transition(), samples)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert grads.norm() == pytest.approx(0.0, abs=1e-10)


def test_bellman_target_rewards_entropy(small_net):
    state = make_state(small_net, constant_critic(0.0), constant_critic(2.0))
    batch = single_transition()
    peaked = soft_bellman_target(state, batch, ActionSamples(np.zeros((1, 2, 1)), np.zeros((1, 2))))
    spread = soft_bellman_target(state, batch, ActionSamples(np.zeros((1, 2, 1)), np.array([[0.0, -2.0]])))
    # The mean over actions of -alpha log pi is 1
    assert spread[0] == pytest.approx(peaked[0] + 0.9)


def test_bellman_target_names_bad_transition(small_net):
    state = make_state(small_net, constant_critic(0.0), constant_critic(2.0))
    batch = Transition(np.zeros((2, 1)), np.zeros((2, 1)), np.array([0.0, np.nan]), np.zeros((2, 1)))
    with pytest.raises(NonFiniteError, match='transition 1'):
        soft_bellman_target(state, batch, ActionSamples(np.zeros((2, 3, 1)), np.zeros((2, 3))))


def test_critic_gradient_matches_finite_differences(small_net, rng):
    state = make_state(small_net, small_net([2, 8, 1]), small_net([2, 8, 1]))
    batch = Transition(rng.standard_normal((5, 1)), rng.standard_normal((5, 1)), rng.standard_normal(5),
                       rng.standard_normal((5, 1)))
    samples = ActionSamples(rng.standard_normal((5, 3, 1)), rng.standard_normal((5, 3)))

    _, grads = policy_eval_loss(state, batch, samples)
    numeric = central_difference(
        lambda p: policy_eval_loss(dataclasses.replace(state, psi=p), batch, samples)[0], state.psi)
    assert relative_error(flat_params(grads.layers), numeric) < 1e-4


def test_critic_gradient_sees_target_network_only_through_targets(small_net, rng):
    state = make_state(small_net, small_net([2, 8, 1]), small_net([2, 8, 1]))
    moved = dataclasses.replace(state, psi_bar=small_net([2, 8, 1]))
    batch = Transition(rng.standard_normal((5, 1)), rng.standard_normal((5, 1)), rng.standard_normal(5),
                       rng.standard_normal((5, 1)))
    samples = ActionSamples(rng.standard_normal((5, 3, 1)), rng.standard_normal((5, 3)))

    # Shifting rewards by the change in targets reproduces the moved targets with the original psi_bar
    shift = soft_bellman_target(moved, batch, samples) - soft_bellman_target(state, batch, samples)
    shifted = dataclasses.replace(batch, r=batch.r + shift)
    loss_moved, grads_moved = policy_eval_loss(moved, batch, samples)
    loss_shifted, grads_shifted = policy_eval_loss(state, shifted, samples)
    assert loss_shifted == pytest.approx(loss_moved, rel=1e-9)
    assert relative_error(flat_params(grads_shifted.layers), flat_params(grads_moved.layers)) < 1e-9


def test_uniform_improvement_is_plain_flow_matching(small_net, rng):
    state = make_state(small_net, constant_critic(0.0), constant_critic(0.0))
    x_next = np.array([[0.3]])
    samples = ActionSamples(rng.standard_normal((1, 4, 1)), np.full((1, 4), -1.2))
    q = np.full((1, 4), 0.7)

    loss, grads = policy_improve_loss(state, x_next, samples, q, np.random.default_rng(9), mc_pairs=3)
    loss_fm, grads_fm = fm_loss_and_grad(state.theta, x_next[0], samples.u[0], 3, np.random.default_rng(9))
    assert loss == pytest.approx(loss_fm)
    assert np.allclose(flat_params(grads.layers), flat_params(grads_fm.layers))


def test_improvement_weights_per_row():
    w = improvement_weights(np.array([[0.0, 100.0], [1.0, 1.0]]), np.zeros((2, 2)), 1.0)
    assert np.allclose(w.sum(axis=1), 1.0)
    assert w[0, 1] == pytest.approx(1.0)
    assert np.allclose(w[1], 0.5)


def test_improvement_rejects_mismatched_q(small_net, rng):
    state = make_state(small_net, constant_critic(0.0), constant_critic(0.0))
    samples = ActionSamples(np.zeros((1, 4, 1)), np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        policy_improve_loss(state, np.zeros((1, 1)), samples, np.zeros((1, 3)), rng)


def test_polyak_update(small_net):
    a = small_net([2, 3, 1])
    b = small_net([2, 3, 1])
    assert np.array_equal(flat_params(polyak_update(a, b, 1.0).layers), flat_params(b.layers))
    half = polyak_update(a, b, 0.5)
    assert np.allclose(flat_params(half.layers), 0.5 * (flat_params(a.layers) + flat_params(b.layers)))
    with pytest.raises(ValueError):
        polyak_update(a, b, 0.0)
    with pytest.raises(DimensionError):
        polyak_update(a, small_net([2, 4, 1]), 0.5)


def test_polyak_gap_shrinks_geometrically(small_net):
    target, online = small_net([2, 3, 1]), small_net([2, 3, 1])
    gap0 = flat_params(target.layers) - flat_params(online.layers)
    for _ in range(50):
        target = polyak_update(target, online, 0.1)
    gap = flat_params(target.layers) - flat_params(online.layers)
    assert np.allclose(gap, 0.9 ** 50 * gap0, rtol=0, atol=1e-12)


def test_state_networks(quickstart_sys, rng):
    state = SacState.create(quickstart_sys, tiny_config(), rng)
    assert state.theta.sizes == [5, 8, 2]
    assert state.psi.sizes == [4, 8, 1]
    assert state.theta_bar is state.theta
    policy = state.policy(target=True)
    assert (policy.state_dim, policy.action_dim) == (2, 2)


def test_draw_actions_shapes(quickstart_sys, rng):
    state = SacState.create(quickstart_sys, tiny_config(), rng)
    samples = draw_actions(state.policy(4), rng.standard_normal((3, 2)), 5, rng)
    assert samples.u.shape == (3, 5, 2)
    assert samples.log_pi.shape == (3, 5)
    assert np.all(np.isfinite(samples.log_pi))


def test_streams_are_independent_and_reproducible():
    first, again = spawn_streams(3), spawn_streams(3)
    draws = {name: rng.random() for name, rng in first.items()}
    assert draws == {name: rng.random() for name, rng in again.items()}
    assert len(set(draws.values())) == len(draws)


def test_train_without_episodes(quickstart_sys):
    result = train(quickstart_sys, tiny_config(episodes=0), seed=1)
    assert result.rows == []
    assert result.final_state.episode == 0


def test_train_is_deterministic(quickstart_sys):
    seen = []
    first = train(quickstart_sys, tiny_config(), seed=7, on_evaluation=lambda episode, state: seen.append(episode))
    second = train(quickstart_sys, tiny_config(), seed=7)
    other = train(quickstart_sys, tiny_config(), seed=8)

    assert seen == [2, 4]
    assert [row['episode'] for row in first.rows] == [2, 4]
    assert first.rows == second.rows
    assert first.rows != other.rows
    assert first.final_state.episode == 4
    assert np.array_equal(flat_params(first.final_state.theta.layers), flat_params(second.final_state.theta.layers))
    for row in first.rows:
        assert all(np.isfinite(row[k]) for k in TRAIN_LOG_COLUMNS)


def test_critic_warmup_holds_the_actor(quickstart_sys):
    config = tiny_config(critic_warmup=4)
    initial = SacState.create(quickstart_sys, config, spawn_streams(7)['init'])
    result = train(quickstart_sys, config, seed=7)
    final = result.final_state

    assert final.episode == 4
    assert np.array_equal(flat_params(final.theta.layers), flat_params(initial.theta.layers))
    assert np.array_equal(flat_params(final.theta_bar.layers), flat_params(initial.theta.layers))
    assert not np.array_equal(flat_params(final.psi.layers), flat_params(initial.psi.layers))
    for row in result.rows:
        assert np.isfinite(row['loss_q'])
        assert np.isnan(row['loss_pi'])


def test_actor_starts_after_warmup(quickstart_sys):
    config = tiny_config(critic_warmup=2)
    initial = SacState.create(quickstart_sys, config, spawn_streams(7)['init'])
    result = train(quickstart_sys, config, seed=7)
    assert not np.array_equal(flat_params(result.final_state.theta.layers), flat_params(initial.theta.layers))
    assert np.isnan(result.rows[0]['loss_pi'])
    assert np.isfinite(result.rows[1]['loss_pi'])


def test_training_log_csv(quickstart_sys):
    result = train(quickstart_sys, tiny_config(), seed=7)
    f = io.StringIO()
    result.to_csv(f)
    rows = list(csv.reader(io.StringIO(f.getvalue())))
    assert rows[0] == TRAIN_LOG_COLUMNS
    assert len(rows) == 3
    assert float(rows[1][1]) == result.rows[0]['eval_return_mean']


def test_numerical_failure_aborts_with_snapshot(quickstart_sys, monkeypatch):
    def broken(state, batch, samples):
        raise NonFiniteError('critic exploded')

    monkeypatch.setattr('flowsac.sac_isfm.policy_eval_loss', broken)
    with pytest.raises(TrainingAborted) as info:
        train(quickstart_sys, tiny_config(), seed=7)
    snapshot = info.value.snapshot
    assert snapshot['episode'] == 1
    assert 'critic exploded' in snapshot['error']
    assert snapshot['theta_norm'] > 0
    assert info.value.exit_code == 2


@pytest.mark.slow
def test_bandit_recovers_boltzmann_distribution(rng):
    # exp(Q / alpha) with Q = -2 (u - 1)^2 and alpha = 1 is N(1, 0.25)
    policy = train_bandit(lambda u: -2.0 * (u[:, 0] - 1.0) ** 2, action_dim=1, alpha=1.0, steps=3000, seed=0)
    from flowsac.flow_policy import push_forward
    u = push_forward(policy, np.zeros((4000, 0)), rng.standard_normal((4000, 1)))
    assert u.mean() == pytest.approx(1.0, abs=0.15)
    assert u.std() == pytest.approx(0.5, abs=0.1)


@pytest.mark.slow
@pytest.mark.parametrize('alpha', [0.5, 1.0, 2.0])
def test_bandit_covariance_scales_with_temperature(alpha):
    # exp(-u'u / alpha) is N(0, alpha/2 I)
    policy = train_bandit(lambda u: -np.sum(u * u, axis=1), action_dim=2, alpha=alpha, steps=3000, seed=1)
    from flowsac.flow_policy import push_forward
    rng = np.random.default_rng(2)
    u = push_forward(policy, np.zeros((10_000, 0)), rng.standard_normal((10_000, 2)))
    assert np.linalg.norm(u.mean(axis=0)) < 0.05
    assert np.allclose(np.cov(u, rowvar=False), 0.5 * alpha * np.eye(2), atol=0.15 * 0.5 * alpha)


@pytest.mark.slow
def test_quickstart_training_reaches_the_optimum(quickstart_sys):
    from flowsac.evaluate import EvalConfig, evaluate_policy
    from flowsac.oracle import riccati_value_iteration, unregularized_value
    optimum = riccati_value_iteration(quickstart_sys)
    best = unregularized_value(quickstart_sys, optimum.policy)

    result = train(quickstart_sys, SacConfig(), seed=0)
    final = result.rows[-1]
    assert final['episode'] == 20_000
    assert abs(final['eval_return_mean'] - best) < 0.1 * abs(best)

    policy = result.final_state.policy().with_ode_steps(64)
    report = evaluate_policy(quickstart_sys, policy, optimum, EvalConfig(n_traj=10, traj_len=20, n_action_samples=4000),
                             seed=0)
    assert report.mean_dists.mean() < 0.15
    assert report.cov_dists.mean() < 0.1
