'''Conditional flow matching and its importance-sampling variant

The velocity network v(x, tau, u) is regressed onto the CondOT target
u_1 - eps along the path u_tau = tau u_1 + (1 - tau) eps. Plain flow matching
averages the squared error over samples drawn from the target distribution.
Importance-sampling flow matching (ISFM) draws samples from another
distribution and reweights each one with self-normalized importance weights.

Both losses share one kernel, so ISFM with uniform weights is the plain loss
evaluated on the same random draws, bit for bit.
'''
from __future__ import annotations
import numpy as np
from dataclasses import dataclass
from typing import Sequence
from .autodiff_net import GradientBundle, MlpParams, mlp_value_and_backward
from .errors import DimensionError, NonFiniteError
from .flow_policy import velocity_inputs


# The conditional field (u_1 - u_tau) / (1 - tau) is singular at tau = 1, so
# flow times are drawn from [0, 1 - TAU_MARGIN].
TAU_MARGIN = 1e-3

# Log-weights further than this below the largest one are clamped.
LOG_WEIGHT_FLOOR = 40.0

MC_PAIRS = 4


@dataclass(frozen=True, eq=False)
class CondOtSample:
    u1: np.ndarray
    eps: np.ndarray
    tau_flow: float | np.ndarray
    u_tau: np.ndarray
    target_velocity: np.ndarray


@dataclass(frozen=True, eq=False)
class WeightedBatch:
    '''Actions drawn at one state with their self-normalized weights'''
    x: np.ndarray
    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        samples = np.asarray(self.samples, dtype=np.float64)
        samples = samples.reshape(-1, 1) if samples.ndim == 1 else samples
        weights = np.asarray(self.weights, dtype=np.float64)

        if x.ndim != 1:
            raise DimensionError('WeightedBatch holds a single state')
        if weights.shape != (samples.shape[0],):
            raise DimensionError(f'{weights.size} weights for {samples.shape[0]} samples')
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise NonFiniteError('Importance weights must be finite and non-negative')
        if not np.any(weights > 0):
            raise ValueError('At least one importance weight must be positive')
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f'Importance weights sum to {weights.sum():.15f}, expected 1')

        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def uniform(cls, x, samples) -> WeightedBatch:
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.shape[0]
        return cls(x, samples, np.full(n, 1.0 / n))


def condot_pair(u1: np.ndarray, eps: np.ndarray, tau_flow) -> CondOtSample:
    '''Point on the CondOT path between noise eps and data point u1'''
    tau = np.asarray(tau_flow, dtype=np.float64)
    if np.any(tau < 0) or np.any(tau >= 1):
        raise ValueError(f'Flow time must lie in [0, 1), got {tau_flow}')
    u1 = np.asarray(u1, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if u1.shape != eps.shape:
        raise DimensionError(f'Data point shape {u1.shape} does not match noise shape {eps.shape}')

    t = tau[..., None] if tau.ndim else tau
    u_tau = t * u1 + (1 - t) * eps
    return CondOtSample(u1, eps, tau_flow, u_tau, u1 - eps)


def importance_weights(q_values: Sequence[float], log_pi: Sequence[float], alpha: float) -> np.ndarray:
    '''Self-normalized weights proportional to exp(Q/alpha) / pi

    Log-weights are shifted by their maximum and clamped LOG_WEIGHT_FLOOR below
    it before exponentiation, then normalized to sum to one.
    '''
    q = np.asarray(q_values, dtype=np.float64)
    lp = np.asarray(log_pi, dtype=np.float64)
    if q.shape != lp.shape or q.ndim != 1 or q.size == 0:
        raise DimensionError(f'Need equal-length non-empty value lists, got {q.shape} and {lp.shape}')
    if alpha <= 0:
        raise ValueError('alpha must be positive')
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(lp))):
        raise NonFiniteError('Q values and log-probabilities must be finite')

    logw = q / alpha - lp
    logw = np.clip(logw - logw.max(), -LOG_WEIGHT_FLOOR, 0.0)
    w = np.exp(logw)
    return w / w.sum()


def draw_condot_noise(rng: np.random.Generator, n: int, mc_pairs: int, action_dim: int,
                      tau_margin=TAU_MARGIN) -> tuple[np.ndarray, np.ndarray]:
    '''Noise (n, mc_pairs, d_u) and flow times (n, mc_pairs) for n samples'''
    eps = rng.standard_normal((n, mc_pairs, action_dim))
    tau = rng.uniform(0.0, 1.0 - tau_margin, size=(n, mc_pairs))
    return eps, tau


def condot_regression_loss(theta: MlpParams, x: np.ndarray, u1: np.ndarray, weights: np.ndarray,
                           eps: np.ndarray, tau: np.ndarray) -> tuple[float, GradientBundle]:
    '''Weighted CondOT regression loss for explicit noise draws

    x (n, d_x) and u1 (n, d_u) are the sample rows with weights (n,). eps has
    shape (n, m, d_u) and tau (n, m): m Monte-Carlo pairs per sample. The loss
    is sum_i w_i * mean_j ||v(x_i, tau_ij, u_tau_ij) - (u1_i - eps_ij)||^2.
    '''
    n, m, d_u = eps.shape
    pair = condot_pair(np.repeat(u1[:, None, :], m, axis=1), eps, tau)
    rows_x = np.repeat(x, m, axis=0)
    inputs = velocity_inputs(rows_x, tau.reshape(-1), pair.u_tau.reshape(-1, d_u))
    target = pair.target_velocity.reshape(-1, d_u)
    row_w = np.repeat(weights / m, m)

    def weighted_squared_error(out):
        r = out - target
        loss = float(np.sum(row_w * np.sum(r * r, axis=1)))
        return loss, 2.0 * row_w[:, None] * r

    loss, grads = mlp_value_and_backward(theta, inputs, weighted_squared_error)
    if not np.isfinite(loss):
        raise NonFiniteError('Flow matching loss is not finite')
    return loss, grads


def _rows(theta: MlpParams, batches: Sequence[WeightedBatch]):
    x = np.concatenate([np.repeat(b.x[None, :], b.samples.shape[0], axis=0) for b in batches])
    u1 = np.concatenate([b.samples for b in batches])
    w = np.concatenate([b.weights for b in batches])
    d_u = theta.output_dim
    if u1.shape[1] != d_u or x.shape[1] + 1 + d_u != theta.input_dim:
        raise DimensionError('Batch dimensions do not match the velocity network')
    return x, u1, w


def isfm_loss_and_grad(theta: MlpParams, batch: WeightedBatch | Sequence[WeightedBatch], mc_pairs: int,
                       rng: np.random.Generator, tau_margin=TAU_MARGIN) -> tuple[float, GradientBundle]:
    '''Importance-sampling flow matching loss and its parameter gradient

    A sequence of batches (one per state) yields the sum of their losses.
    '''
    batches = [batch] if isinstance(batch, WeightedBatch) else list(batch)
    x, u1, w = _rows(theta, batches)
    eps, tau = draw_condot_noise(rng, u1.shape[0], mc_pairs, u1.shape[1], tau_margin)
    return condot_regression_loss(theta, x, u1, w, eps, tau)


def fm_loss_and_grad(theta: MlpParams, x: np.ndarray, samples: np.ndarray, mc_pairs: int,
                     rng: np.random.Generator, tau_margin=TAU_MARGIN) -> tuple[float, GradientBundle]:
    '''Plain flow matching loss for samples drawn from the target at state x'''
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError('Flow matching needs at least one sample')
    return isfm_loss_and_grad(theta, WeightedBatch.uniform(x, samples), mc_pairs, rng, tau_margin)
