'''Flow-based stochastic policies

A policy pi(.|x) is the distribution of u_1 obtained by integrating the ODE
du/dtau = v(x, tau, u) from tau=0 to tau=1, starting from u_0 ~ N(0, I). The
log-probability of u_1 follows from the instantaneous change of variables:

    log pi(u_1|x) = log N(u_0; 0, I) - int_0^1 tr(dv/du)(x, tau, u_tau) dtau

Both integrals use explicit midpoint (RK2) steps of uniform size, with the
divergence evaluated at the same midpoint nodes as the velocity. The trace is
exact: one forward-mode directional derivative per action coordinate.
'''
from __future__ import annotations
import dataclasses
import math
import numpy as np
import scipy.stats
from dataclasses import dataclass, field
from typing import Protocol
from .autodiff_net import MlpParams, mlp_forward, mlp_input_jvp
from .errors import DimensionError, NonFiniteError


TRAIN_ODE_STEPS = 16
EVAL_ODE_STEPS = 64


class Flow(Protocol):
    state_dim: int
    action_dim: int
    ode_steps: int

    def velocity(self, x: np.ndarray, tau: float, u: np.ndarray) -> np.ndarray: ...

    def divergence(self, x: np.ndarray, tau: float, u: np.ndarray) -> np.ndarray: ...


def velocity_inputs(x: np.ndarray, tau, u: np.ndarray) -> np.ndarray:
    '''Network input rows [x, tau, u] for batches of states and actions'''
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (u.shape[0],))
    return np.concatenate([x, tau[:, None], u], axis=1)


@dataclass(frozen=True, eq=False)
class FlowPolicy:
    '''A policy whose velocity field is a multilayer perceptron

    The network reads [x, tau, u] and outputs the velocity in action space.
    '''
    net: MlpParams
    state_dim: int
    action_dim: int
    ode_steps: int = TRAIN_ODE_STEPS

    def __post_init__(self):
        if self.net.input_dim != self.state_dim + 1 + self.action_dim:
            raise DimensionError(f'Velocity network input dimension {self.net.input_dim} does not match '
                                 f'state dimension {self.state_dim} and action dimension {self.action_dim}')
        if self.net.output_dim != self.action_dim:
            raise DimensionError(f'Velocity network output dimension {self.net.output_dim} '
                                 f'is not the action dimension {self.action_dim}')
        if self.ode_steps < 1:
            raise ValueError('ode_steps must be at least 1')

    def with_ode_steps(self, ode_steps: int) -> FlowPolicy:
        return dataclasses.replace(self, ode_steps=ode_steps)

    def with_net(self, net: MlpParams) -> FlowPolicy:
        return dataclasses.replace(self, net=net)

    def velocity(self, x, tau, u):
        return mlp_forward(self.net, velocity_inputs(x, tau, u))

    def divergence(self, x, tau, u):
        inputs = velocity_inputs(x, tau, u)
        offset = self.state_dim + 1
        trace = np.zeros(u.shape[0])
        for j in range(self.action_dim):
            direction = np.zeros(self.net.input_dim)
            direction[offset + j] = 1.0
            trace += mlp_input_jvp(self.net, inputs, direction)[:, j]
        return trace


@dataclass(frozen=True, eq=False)
class GaussianPathFlow:
    '''Closed-form CondOT marginal field of a Gaussian target

    The target is N(mean - gain x, cov). Starting from N(0, I), the CondOT
    path has mean tau*mu and covariance tau^2 cov + (1-tau)^2 I, which share
    the eigenvectors of cov. Along eigen-direction k the standard deviation is
    sigma_k(tau) = sqrt(tau^2 lambda_k + (1-tau)^2) and the velocity is
    mu + V diag(sigma_k'/sigma_k) V^T (u - tau mu).
    '''
    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray | None = None
    ode_steps: int = EVAL_ODE_STEPS
    state_dim: int = field(init=False)
    action_dim: int = field(init=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f'Covariance shape {cov.shape} does not match mean of size {mean.size}')
        gain = np.zeros((mean.size, 0)) if self.gain is None else np.atleast_2d(np.asarray(self.gain, dtype=np.float64))
        if gain.shape[0] != mean.size:
            raise DimensionError(f'Gain shape {gain.shape} does not match action dimension {mean.size}')
        eigval, eigvec = np.linalg.eigh(cov)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)
        object.__setattr__(self, 'gain', gain)
        object.__setattr__(self, 'state_dim', gain.shape[1])
        object.__setattr__(self, 'action_dim', mean.size)
        object.__setattr__(self, '_eig', (eigval, eigvec))

    @classmethod
    def isotropic(cls, mean, scale: float, ode_steps=EVAL_ODE_STEPS) -> GaussianPathFlow:
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(mean, scale ** 2 * np.eye(mean.size), ode_steps=ode_steps)

    def with_ode_steps(self, ode_steps: int) -> GaussianPathFlow:
        return GaussianPathFlow(self.mean, self.cov, self.gain, ode_steps)

    def _rates(self, tau: float) -> np.ndarray:
        lam, _ = self._eig
        sigma2 = tau ** 2 * lam + (1 - tau) ** 2
        return (tau * lam - (1 - tau)) / sigma2

    def target_mean(self, x: np.ndarray) -> np.ndarray:
        return self.mean - x @ self.gain.T

    def velocity(self, x, tau, u):
        _, vec = self._eig
        mu = self.target_mean(x)
        return mu + ((u - tau * mu) @ vec * self._rates(tau)) @ vec.T

    def divergence(self, x, tau, u):
        return np.full(u.shape[0], float(np.sum(self._rates(tau))))


@dataclass(frozen=True, eq=False)
class FlowSample:
    u0: np.ndarray
    u1: np.ndarray
    log_prob: np.ndarray | float
    path_nodes: list[tuple[float, np.ndarray]]


def standard_normal_logpdf(u: np.ndarray) -> np.ndarray:
    return scipy.stats.norm.logpdf(u).sum(axis=-1)


def _prepare(policy: Flow, x, u0) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u0, dtype=np.float64)
    single = x.ndim == 1 and u.ndim == 1
    x = x[None, :] if x.ndim == 1 else x
    u = u[None, :] if u.ndim == 1 else u

    if x.shape[1] != policy.state_dim:
        raise DimensionError(f'State dimension {x.shape[1]} does not match policy state dimension {policy.state_dim}')
    if u.shape[1] != policy.action_dim:
        raise DimensionError(f'Noise dimension {u.shape[1]} does not match policy action dimension {policy.action_dim}')

    if x.shape[0] != u.shape[0]:
        if x.shape[0] == 1:
            x = np.repeat(x, u.shape[0], axis=0)
        elif u.shape[0] == 1:
            u = np.repeat(u, x.shape[0], axis=0)
        else:
            raise DimensionError(f'Cannot pair {x.shape[0]} states with {u.shape[0]} noise rows')
    return x, u, single


def _integrate(policy: Flow, x: np.ndarray, u: np.ndarray, with_log_prob: bool):
    h = 1.0 / policy.ode_steps
    log_prob = standard_normal_logpdf(u) if with_log_prob else None
    nodes = [(0.0, u)]

    for k in range(policy.ode_steps):
        tau = k * h
        mid = tau + 0.5 * h
        u_mid = u + 0.5 * h * policy.velocity(x, tau, u)
        if with_log_prob:
            log_prob = log_prob - h * policy.divergence(x, mid, u_mid)
        u = u + h * policy.velocity(x, mid, u_mid)

        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f'Flow state became non-finite at tau={mid:.4f}; the velocity field diverges')
        nodes.append(((k + 1) * h, u))

    if with_log_prob and not np.all(np.isfinite(log_prob)):
        raise NonFiniteError('Log-probability became non-finite during integration')
    return u, log_prob, nodes


def sample_action(policy: Flow, x: np.ndarray, u0: np.ndarray) -> FlowSample:
    '''Push base noise u0 through the flow and accumulate its log-probability

    x and u0 are single rows or batches; a single state is shared by a batch
    of noise rows. The caller draws u0 from N(0, I).
    '''
    x2, u, single = _prepare(policy, x, u0)
    u1, log_prob, nodes = _integrate(policy, x2, u, True)
    if single:
        return FlowSample(u[0], u1[0], float(log_prob[0]), [(t, n[0]) for t, n in nodes])
    return FlowSample(u, u1, log_prob, nodes)


def push_forward(policy: Flow, x: np.ndarray, u0: np.ndarray) -> np.ndarray:
    '''Actions for base noise u0, without the log-probability integral'''
    x2, u, single = _prepare(policy, x, u0)
    u1, _, _ = _integrate(policy, x2, u, False)
    return u1[0] if single else u1


def log_prob_of_sample(policy: Flow, x: np.ndarray, sample: FlowSample):
    '''Recompute the log-probability of a sample from its base noise

    The integration is deterministic, so the result equals sample.log_prob
    when the policy parameters and step count are unchanged.
    '''
    if np.shape(sample.u0)[-1] != policy.action_dim:
        raise DimensionError('Sample does not match the policy action dimension')
    return sample_action(policy, x, sample.u0).log_prob


def entropy_estimate(policy: Flow, x: np.ndarray, n: int, rng: np.random.Generator) -> tuple[float, float]:
    '''Monte-Carlo entropy of pi(.|x) and its standard error'''
    if n < 1:
        raise ValueError('Entropy estimate needs at least one sample')
    u0 = rng.standard_normal((n, policy.action_dim))
    log_prob = sample_action(policy, np.atleast_2d(np.asarray(x, dtype=np.float64)), u0).log_prob
    stderr = float(np.std(log_prob, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(-np.mean(log_prob)), stderr
