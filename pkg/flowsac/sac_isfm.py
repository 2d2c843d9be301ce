'''Soft actor-critic with importance-sampling flow matching

The critic Q^psi is regressed onto the soft Bellman target built from the
target critic and N actions sampled from the policy at the next state. The
actor is a flow policy improved by importance-sampling flow matching: the same
N actions are reweighted towards exp(Q^psi / alpha) and the velocity network
is regressed onto them. Both parameter sets have Polyak-averaged targets.
'''
from __future__ import annotations
import csv
import dataclasses
import logging
import math
import numpy as np
from dataclasses import dataclass, field
from typing import Callable, TextIO
from tqdm import tqdm
from . import TRAIN_LOG_COLUMNS
from .autodiff_net import (AdamState, GradientBundle, Layer, MlpParams, adam_step, init_mlp,
    mlp_forward, mlp_value_and_backward)
from .errors import DimensionError, NonFiniteError, NumericalError, TrainingAborted
from .flow_matching import MC_PAIRS, WeightedBatch, importance_weights, isfm_loss_and_grad
from .flow_policy import EVAL_ODE_STEPS, TRAIN_ODE_STEPS, FlowPolicy, push_forward, sample_action
from .lqr import LqrSystem, Transition, discounted_return, env_step


log = logging.getLogger(__name__)

# Names of the independent random streams spawned from the training seed.
STREAMS = ('init', 'rollout', 'minibatch', 'actions', 'condot', 'evaluation')


@dataclass(frozen=True)
class SacConfig:
    episodes: int = 20_000
    buffer_capacity: int = 100_000
    batch_size: int = 64
    n_actions: int = 16
    learning_rate_q: float = 1e-3
    learning_rate_pi: float = 3e-4
    polyak_tau: float = 0.005
    segment_length: int = 10
    reset_every: int = 100
    state_clip: float = 100.0
    eval_every: int = 500
    eval_trajectories: int = 100
    eval_horizon: int = 100
    train_ode_steps: int = TRAIN_ODE_STEPS
    eval_ode_steps: int = EVAL_ODE_STEPS
    mc_pairs: int = MC_PAIRS
    hidden_sizes: tuple[int, ...] = (64, 64)
    use_target_policy_for_eval_actions: bool = False
    # Episodes that update only the critic before the actor starts moving
    critic_warmup: int = 2000

    def __post_init__(self):
        if not 0 < self.polyak_tau <= 1:
            raise ValueError(f'polyak_tau must lie in (0, 1], got {self.polyak_tau}')
        for name in ('buffer_capacity', 'batch_size', 'n_actions', 'segment_length', 'reset_every',
                     'eval_every', 'eval_trajectories', 'eval_horizon', 'train_ode_steps',
                     'eval_ode_steps', 'mc_pairs'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be at least 1')
        if self.critic_warmup < 0:
            raise ValueError('critic_warmup must not be negative')
        if self.episodes < 0:
            raise ValueError('episodes must not be negative')


class ReplayBuffer:
    '''Bounded FIFO store of transitions backed by preallocated arrays'''

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError('Replay buffer capacity must be at least 1')
        self.capacity = capacity
        self._x = np.empty((capacity, state_dim))
        self._u = np.empty((capacity, action_dim))
        self._r = np.empty(capacity)
        self._x_next = np.empty((capacity, state_dim))
        self._start = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, t: Transition):
        '''Append one transition or a batch of them, evicting the oldest at capacity'''
        x, u = np.atleast_2d(t.x), np.atleast_2d(t.u)
        r, x_next = np.atleast_1d(t.r), np.atleast_2d(t.x_next)
        if x.shape[1] != self._x.shape[1] or x_next.shape != x.shape or u.shape != (x.shape[0], self._u.shape[1]) \
                or r.shape != (x.shape[0],):
            raise DimensionError('Transition does not match the replay buffer dimensions')

        for i in range(x.shape[0]):
            slot = (self._start + self._size) % self.capacity
            self._x[slot], self._u[slot], self._r[slot], self._x_next[slot] = x[i], u[i], r[i], x_next[i]
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity

    def _gather(self, slots: np.ndarray) -> Transition:
        return Transition(self._x[slots].copy(), self._u[slots].copy(), self._r[slots].copy(),
                          self._x_next[slots].copy())

    def items(self) -> Transition:
        '''All stored transitions, oldest first'''
        return self._gather((self._start + np.arange(self._size)) % self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Transition:
        '''Rows drawn without replacement; the whole buffer when it holds fewer than batch_size'''
        if self._size == 0:
            raise ValueError('Cannot sample from an empty replay buffer')
        picks = rng.choice(self._size, size=min(batch_size, self._size), replace=False)
        return self._gather((self._start + picks) % self.capacity)


@dataclass(frozen=True, eq=False)
class ActionSamples:
    '''N actions per next state, shape (B, N, d_u), with their log-probabilities (B, N)'''
    u: np.ndarray
    log_pi: np.ndarray


@dataclass(frozen=True, eq=False)
class SacState:
    theta: MlpParams
    theta_bar: MlpParams
    psi: MlpParams
    psi_bar: MlpParams
    adam_theta: AdamState
    adam_psi: AdamState
    alpha: float
    gamma: float
    polyak_tau: float = 0.005
    n_actions: int = 16
    batch_size: int = 64
    episode: int = 0

    def __post_init__(self):
        if not self.theta.same_shape(self.theta_bar) or not self.psi.same_shape(self.psi_bar):
            raise DimensionError('Target networks must have the shape of their online networks')
        if not 0 < self.polyak_tau <= 1:
            raise ValueError(f'polyak_tau must lie in (0, 1], got {self.polyak_tau}')

    @classmethod
    def create(cls, sys: LqrSystem, config: SacConfig, rng: np.random.Generator) -> SacState:
        d_x, d_u = sys.state_dim, sys.action_dim
        theta = init_mlp([d_x + 1 + d_u, *config.hidden_sizes, d_u], rng)
        psi = init_mlp([d_x + d_u, *config.hidden_sizes, 1], rng)
        return cls(theta, theta, psi, psi,
                   AdamState.create(theta, config.learning_rate_pi),
                   AdamState.create(psi, config.learning_rate_q),
                   sys.alpha, sys.gamma, config.polyak_tau, config.n_actions, config.batch_size)

    def policy(self, ode_steps=TRAIN_ODE_STEPS, target=False) -> FlowPolicy:
        net = self.theta_bar if target else self.theta
        d_u = net.output_dim
        return FlowPolicy(net, net.input_dim - 1 - d_u, d_u, ode_steps)


def q_values(psi: MlpParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    '''Q^psi at state rows x and action rows u'''
    return mlp_forward(psi, np.concatenate([x, u], axis=1))[:, 0]


def draw_actions(policy: FlowPolicy, x_next: np.ndarray, n: int, rng: np.random.Generator) -> ActionSamples:
    '''n policy actions and their log-probabilities for every row of x_next'''
    b = x_next.shape[0]
    rows = np.repeat(x_next, n, axis=0)
    sample = sample_action(policy, rows, rng.standard_normal((b * n, policy.action_dim)))
    return ActionSamples(sample.u1.reshape(b, n, -1), np.asarray(sample.log_prob).reshape(b, n))


def _next_state_rows(x_next: np.ndarray, samples: ActionSamples) -> tuple[np.ndarray, np.ndarray]:
    b, n, d_u = samples.u.shape
    if x_next.shape[0] != b or samples.log_pi.shape != (b, n):
        raise DimensionError('Action samples do not match the batch of next states')
    return np.repeat(x_next, n, axis=0), samples.u.reshape(b * n, d_u)


def soft_bellman_target(state: SacState, batch: Transition, samples: ActionSamples) -> np.ndarray:
    '''r + gamma * mean_i (Q^psi_bar(x', u_i) - alpha log pi_i)'''
    x_rows, u_rows = _next_state_rows(batch.x_next, samples)
    q_bar = q_values(state.psi_bar, x_rows, u_rows).reshape(samples.log_pi.shape)
    target = np.asarray(batch.r) + state.gamma * np.mean(q_bar - state.alpha * samples.log_pi, axis=1)

    bad = np.flatnonzero(~np.isfinite(target))
    if bad.size:
        i = int(bad[0])
        raise NonFiniteError(f'Soft Bellman target of transition {i} is not finite '
                             f'(x={batch.x[i].tolist()}, u={batch.u[i].tolist()}, r={float(batch.r[i])})')
    return target


def policy_eval_loss(state: SacState, batch: Transition, samples: ActionSamples) -> tuple[float, GradientBundle]:
    '''Critic loss sum_b (Q^psi(x, u) - target)^2 and its gradient with respect to psi

    The target is computed first and held constant.
    '''
    target = soft_bellman_target(state, batch, samples)
    inputs = np.concatenate([batch.x, batch.u], axis=1)

    def squared_error(out):
        r = out[:, 0] - target
        return float(np.sum(r * r)), 2.0 * r[:, None]

    return mlp_value_and_backward(state.psi, inputs, squared_error)


def improvement_weights(q: np.ndarray, log_pi: np.ndarray, alpha: float) -> np.ndarray:
    '''Self-normalized weights of every row of a (B, N) block'''
    return np.stack([importance_weights(qi, li, alpha) for qi, li in zip(q, log_pi)])


def policy_improve_loss(state: SacState, x_next: np.ndarray, samples: ActionSamples, q: np.ndarray,
                        rng: np.random.Generator, mc_pairs=MC_PAIRS) -> tuple[float, GradientBundle]:
    '''ISFM actor loss summed over the batch of next states and its gradient with respect to theta'''
    q = np.asarray(q, dtype=np.float64)
    if q.shape != samples.log_pi.shape:
        raise DimensionError(f'Q values {q.shape} do not match the action samples {samples.log_pi.shape}')
    weights = improvement_weights(q, samples.log_pi, state.alpha)
    batches = [WeightedBatch(x, u, w) for x, u, w in zip(x_next, samples.u, weights)]
    return isfm_loss_and_grad(state.theta, batches, mc_pairs, rng)


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    '''tau * online + (1 - tau) * target, elementwise'''
    if not target.same_shape(online):
        raise DimensionError('Polyak update needs networks of the same shape')
    if not 0 < tau <= 1:
        raise ValueError(f'tau must lie in (0, 1], got {tau}')
    return target.replace_layers([Layer(tau * o.weight + (1 - tau) * t.weight, tau * o.bias + (1 - tau) * t.bias)
                                  for t, o in zip(target.layers, online.layers)])


def _weight_entropy(weights: np.ndarray) -> float:
    w = np.where(weights > 0, weights, 1.0)
    return float(np.mean(-np.sum(weights * np.log(w), axis=1)))


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    final_state: SacState | None = None

    def append(self, **row):
        self.rows.append({k: row[k] for k in TRAIN_LOG_COLUMNS})

    def to_csv(self, f: TextIO):
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in self.rows:
            writer.writerow([repr(row[k]) for k in TRAIN_LOG_COLUMNS])


def evaluate_return(sys: LqrSystem, policy: FlowPolicy, config: SacConfig, rng: np.random.Generator) -> tuple[float, float]:
    '''Unregularized discounted return of a flow policy, mean and standard error'''
    policy = policy.with_ode_steps(config.eval_ode_steps)

    def act(x, rng):
        return push_forward(policy, x, rng.standard_normal((x.shape[0], policy.action_dim)))

    return discounted_return(sys, act, config.eval_horizon, config.eval_trajectories, rng)


def spawn_streams(seed: int | np.random.SeedSequence) -> dict[str, np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, ss.spawn(len(STREAMS)))}


def train(sys: LqrSystem, config: SacConfig, seed: int | np.random.SeedSequence, progress=False,
          on_evaluation: Callable[[int, SacState], None] | None = None) -> TrainingLog:
    '''Run SAC-ISFM for config.episodes episodes

    Every episode rolls out one segment with the current policy, stores it,
    and performs one critic and one actor update on a minibatch. The first
    config.critic_warmup episodes skip the actor update, so the critic has
    learned the curvature of Q in the action before the Boltzmann weights
    start reshaping the policy. Every
    config.eval_every episodes the unregularized return is evaluated, a log
    row is appended and on_evaluation is called with the current state.
    '''
    rngs = spawn_streams(seed)
    state = SacState.create(sys, config, rngs['init'])
    buffer = ReplayBuffer(config.buffer_capacity, sys.state_dim, sys.action_dim)
    result = TrainingLog()

    x = sys.init_state.sample(1, rngs['rollout'])
    since_reset = 0
    loss_q = loss_pi = weight_entropy = grad_q = grad_pi = math.nan
    weights = np.ones((1, 1))

    bar = tqdm(range(1, config.episodes + 1), disable=not progress, desc='Training', unit='episode')
    for episode in bar:
        actor = state.policy(config.train_ode_steps)
        for _ in range(config.segment_length):
            u = push_forward(actor, x, rngs['rollout'].standard_normal((1, sys.action_dim)))
            step = env_step(sys, x, u, rngs['rollout'])
            buffer.push(step)
            x = step.x_next
            since_reset += 1
            if since_reset >= config.reset_every or np.linalg.norm(x) > config.state_clip:
                x = sys.init_state.sample(1, rngs['rollout'])
                since_reset = 0

        try:
            batch = buffer.sample(config.batch_size, rngs['minibatch'])
            sampler = state.policy(config.train_ode_steps, target=config.use_target_policy_for_eval_actions)
            samples = draw_actions(sampler, batch.x_next, config.n_actions, rngs['actions'])

            loss_q, g_q = policy_eval_loss(state, batch, samples)
            psi, adam_psi = adam_step(state.psi, g_q, state.adam_psi)
            state = dataclasses.replace(state, psi=psi, adam_psi=adam_psi,
                                        psi_bar=polyak_update(state.psi_bar, psi, state.polyak_tau))

            grad_q = g_q.norm()
            if not math.isfinite(loss_q):
                raise NonFiniteError(f'Critic loss is not finite (loss_q={loss_q})')

            if episode > config.critic_warmup:
                x_rows, u_rows = _next_state_rows(batch.x_next, samples)
                q = q_values(state.psi, x_rows, u_rows).reshape(samples.log_pi.shape)
                weights = improvement_weights(q, samples.log_pi, state.alpha)
                loss_pi, g_pi = policy_improve_loss(state, batch.x_next, samples, q, rngs['condot'], config.mc_pairs)
                theta, adam_theta = adam_step(state.theta, g_pi, state.adam_theta)
                state = dataclasses.replace(state, theta=theta, adam_theta=adam_theta,
                                            theta_bar=polyak_update(state.theta_bar, theta, state.polyak_tau))
                grad_pi = g_pi.norm()
                weight_entropy = _weight_entropy(weights)
                if not math.isfinite(loss_pi):
                    raise NonFiniteError(f'Actor loss is not finite (loss_q={loss_q}, loss_pi={loss_pi})')
            state = dataclasses.replace(state, episode=episode)
        except NumericalError as e:
            snapshot = {
                'episode': episode,
                'loss_q': loss_q,
                'loss_pi': loss_pi,
                'weight_entropy': weight_entropy,
                'weight_max': float(np.max(weights)),
                'theta_norm': GradientBundle(state.theta.layers).norm(),
                'psi_norm': GradientBundle(state.psi.layers).norm(),
                'error': str(e)
            }
            raise TrainingAborted(f'Training aborted in episode {episode}: {e}', snapshot) from e

        if episode % config.eval_every == 0:
            mean, stderr = evaluate_return(sys, state.policy(), config, rngs['evaluation'])
            result.append(episode=episode, eval_return_mean=mean, eval_return_stderr=stderr,
                          loss_q=loss_q, loss_pi=loss_pi, weight_entropy=weight_entropy,
                          grad_norm_q=grad_q, grad_norm_pi=grad_pi)
            log.info('Episode %d: return %.4f +- %.4f, loss_q %.4g, loss_pi %.4g',
                     episode, mean, stderr, loss_q, loss_pi)
            bar.set_postfix(ret=f'{mean:.3f}')
            if on_evaluation is not None:
                on_evaluation(episode, state)

    result.final_state = state
    return result


def train_bandit(q_fn: Callable[[np.ndarray], np.ndarray], action_dim: int, alpha: float, steps=3000,
                 seed: int = 0, n_actions=256, hidden_sizes=(64, 64), learning_rate=1e-3,
                 ode_steps=TRAIN_ODE_STEPS, mc_pairs=MC_PAIRS) -> FlowPolicy:
    '''Fit a state-free flow to the Boltzmann distribution of a fixed Q

    Every step draws n_actions actions from the current flow, weights them by
    exp(q_fn(u) / alpha) / pi(u) and takes one ISFM step. The fixed point is
    pi(u) proportional to exp(q_fn(u) / alpha).
    '''
    rngs = spawn_streams(seed)
    theta = init_mlp([1 + action_dim, *hidden_sizes, action_dim], rngs['init'])
    adam = AdamState.create(theta, learning_rate)
    x_rows = np.zeros((n_actions, 0))

    for step in range(steps):
        policy = FlowPolicy(theta, 0, action_dim, ode_steps)
        sample = sample_action(policy, x_rows, rngs['actions'].standard_normal((n_actions, action_dim)))
        w = importance_weights(np.asarray(q_fn(sample.u1), dtype=np.float64), sample.log_prob, alpha)
        loss, grads = isfm_loss_and_grad(theta, WeightedBatch(np.zeros(0), sample.u1, w), mc_pairs, rngs['condot'])
        theta, adam = adam_step(theta, grads, adam)
        if step % 500 == 0:
            log.debug('Bandit step %d: loss %.5f', step, loss)

    return FlowPolicy(theta, 0, action_dim, EVAL_ODE_STEPS)
