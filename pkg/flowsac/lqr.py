'''Max-entropy linear quadratic regulator environment

The system is x' = A x + B u + w with w ~ N(0, sigma_w) and reward
r = -(x'Qx + u'Ru). The module also carries the Gaussian analytics used to
compare learned policies with the closed-form optimum: entropy, the
2-Wasserstein distance and the fourth-order Renyi divergence.
'''
from __future__ import annotations
import functools
import logging
import math
import numpy as np
import scipy.integrate
import scipy.special
import scipy.stats
from dataclasses import dataclass
from typing import Callable
from .errors import DimensionError, DivergentEstimateError, NonFiniteError
from .linalg import (Matrix, Vector, as_matrix, as_vector, check_square, cholesky, logdet_spd,
    sym_psd_sqrt, symmetrize)


log = logging.getLogger(__name__)

# Iteration budget of the stabilizability check run when a system is built.
STABILIZABILITY_MAX_ITER = 100_000

# A D4 estimate whose relative standard error exceeds this value is reported as
# divergent.
RENYI_MAX_RELATIVE_STDERR = 0.1


@dataclass(frozen=True, eq=False)
class InitialState:
    '''Initial state law: a fixed vector when cov is None, otherwise N(mean, cov)'''
    mean: Vector
    cov: Matrix | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x = np.repeat(self.mean[None, :], n, axis=0)
        if self.cov is not None:
            x = x + rng.standard_normal((n, self.mean.size)) @ sym_psd_sqrt(self.cov).T
        return x


@dataclass(frozen=True, eq=False)
class LqrSystem:
    A: Matrix
    B: Matrix
    Q: Matrix
    R: Matrix
    gamma: float
    sigma_w: Matrix
    alpha: float
    init_state: InitialState | None = None
    check_stabilizable: bool = True

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        for name in ('A', 'B', 'Q', 'R', 'sigma_w'):
            set_(name, as_matrix(getattr(self, name), name))

        A, B = self.A, self.B
        check_square(A, 'A')
        d_x, d_u = A.shape[0], B.shape[1]
        if B.shape[0] != d_x:
            raise DimensionError(f'B has {B.shape[0]} rows but A is {d_x}x{d_x}')
        for name, d in (('Q', d_x), ('R', d_u), ('sigma_w', d_x)):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f'{name} must be {d}x{d}, got {getattr(self, name).shape}')

        cholesky(self.Q, 'Q')
        cholesky(self.R, 'R')
        sym_psd_sqrt(self.sigma_w)

        if not 0 < self.gamma < 1:
            raise ValueError(f'gamma must lie in (0, 1), got {self.gamma}')
        if not self.alpha > 0:
            raise ValueError(f'alpha must be positive, got {self.alpha}')

        init = self.init_state
        if init is None:
            init = InitialState(as_vector(np.zeros(d_x)))
        else:
            init = InitialState(as_vector(init.mean, 'init_state.mean'),
                                None if init.cov is None else as_matrix(init.cov, 'init_state.cov'))
        if init.mean.size != d_x or (init.cov is not None and init.cov.shape != (d_x, d_x)):
            raise DimensionError('Initial state law does not match the state dimension')
        set_('init_state', init)

        if self.check_stabilizable:
            # Value iteration only converges for stabilizable systems.
            from .oracle import riccati_value_iteration
            riccati_value_iteration(self, tol=1e-8, max_iter=STABILIZABILITY_MAX_ITER)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    @functools.cached_property
    def noise_factor(self) -> Matrix:
        return sym_psd_sqrt(self.sigma_w)

    def with_alpha(self, alpha: float) -> LqrSystem:
        return LqrSystem(self.A, self.B, self.Q, self.R, self.gamma, self.sigma_w, alpha,
                         self.init_state, check_stabilizable=False)


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    '''pi(.|x) = N(-K x, sigma)'''
    K: Matrix
    sigma: Matrix

    def __post_init__(self):
        object.__setattr__(self, 'K', as_matrix(self.K, 'K'))
        object.__setattr__(self, 'sigma', as_matrix(self.sigma, 'sigma'))
        if self.sigma.shape != (self.K.shape[0], self.K.shape[0]):
            raise DimensionError(f'Covariance {self.sigma.shape} does not match gain {self.K.shape}')
        cholesky(self.sigma, 'sigma')

    @property
    def action_dim(self) -> int:
        return self.K.shape[0]

    @property
    def state_dim(self) -> int:
        return self.K.shape[1]

    def mean(self, x: np.ndarray) -> np.ndarray:
        return -np.asarray(x) @ self.K.T

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        z = rng.standard_normal((x.shape[0], self.action_dim))
        return self.mean(x) + z @ sym_psd_sqrt(self.sigma).T

    def entropy(self) -> float:
        return gaussian_entropy(self.sigma)


@dataclass(frozen=True, eq=False)
class Transition:
    '''One transition, or a batch of transitions with one row per entry'''
    x: np.ndarray
    u: np.ndarray
    r: float | np.ndarray
    x_next: np.ndarray


def env_step(sys: LqrSystem, x: np.ndarray, u: np.ndarray, rng: np.random.Generator) -> Transition:
    '''Advance the system by one step

    x and u are single rows or batches with one row per trajectory.
    '''
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape[-1] != sys.state_dim or u.shape[-1] != sys.action_dim or x.shape[:-1] != u.shape[:-1]:
        raise DimensionError(f'State {x.shape} and action {u.shape} do not match the system')

    w = rng.standard_normal(x.shape) @ sys.noise_factor.T
    x_next = x @ sys.A.T + u @ sys.B.T + w
    r = -(np.einsum('...i,ij,...j->...', x, sys.Q, x) + np.einsum('...i,ij,...j->...', u, sys.R, u))

    if not np.all(np.isfinite(x_next)) or not np.all(np.isfinite(r)):
        raise NonFiniteError('Environment state became non-finite')
    return Transition(x, u, float(r) if np.ndim(r) == 0 else r, x_next)


def default_horizon(gamma: float, tol=1e-3) -> int:
    '''Smallest T with gamma**T < tol'''
    return max(1, math.ceil(math.log(tol) / math.log(gamma)))


def discounted_return(sys: LqrSystem, act: Callable[[np.ndarray, np.random.Generator], np.ndarray],
                      horizon: int, n_traj: int, rng: np.random.Generator, include_entropy=False,
                      entropy_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                      x0: np.ndarray | None = None) -> tuple[float, float]:
    '''Monte-Carlo discounted return and its standard error

    act maps a batch of states (n, d_x) to a batch of actions. All n_traj
    trajectories advance in lockstep. With include_entropy, alpha times
    entropy_fn(states) is added to every reward. x0, when given, replaces the
    initial state law.
    '''
    if horizon < 1 or n_traj < 1:
        raise ValueError('horizon and n_traj must be at least 1')
    if include_entropy and entropy_fn is None:
        raise ValueError('include_entropy requires entropy_fn')

    if x0 is None:
        x = sys.init_state.sample(n_traj, rng)
    else:
        x = np.repeat(np.asarray(x0, dtype=np.float64).reshape(1, -1), n_traj, axis=0)
    total = np.zeros(n_traj)
    discount = 1.0
    for _ in range(horizon):
        u = np.asarray(act(x, rng), dtype=np.float64)
        if u.shape != (n_traj, sys.action_dim):
            raise DimensionError(f'Action sampler returned shape {u.shape}, expected {(n_traj, sys.action_dim)}')
        step = env_step(sys, x, u, rng)
        reward = step.r
        if include_entropy:
            reward = reward + sys.alpha * np.asarray(entropy_fn(x))
        total += discount * reward
        discount *= sys.gamma
        x = step.x_next

    stderr = float(np.std(total, ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else 0.0
    return float(np.mean(total)), stderr


def gaussian_entropy(sigma: Matrix) -> float:
    d = sigma.shape[0]
    return 0.5 * d * math.log(2 * math.pi * math.e) + 0.5 * logdet_spd(sigma)


def w2_gaussians(mu1, sigma1, mu2, sigma2) -> float:
    '''2-Wasserstein distance between N(mu1, sigma1) and N(mu2, sigma2)'''
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise DimensionError('Gaussian parameters have inconsistent dimensions')

    sym_psd_sqrt(sigma1)
    root2 = sym_psd_sqrt(sigma2)
    cross = sym_psd_sqrt(symmetrize(root2 @ sigma1 @ root2))
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1 + sigma2 - 2 * cross))
    return math.sqrt(max(d2, 0.0))


def renyi4_mc(log_p: Callable[[np.ndarray], np.ndarray], log_q: Callable[[np.ndarray], np.ndarray],
              sampler_q: Callable[[int, np.random.Generator], np.ndarray], n: int,
              rng: np.random.Generator) -> float:
    '''Monte-Carlo fourth-order Renyi divergence D4(p||q) with samples from q

    D4 = (1/3) log E_q[(p/q)^4], accumulated in log-sum-exp form. When the
    expectation is infinite the sample mean is dominated by its largest terms;
    a relative standard error above RENYI_MAX_RELATIVE_STDERR raises
    DivergentEstimateError.
    '''
    if n < 1:
        raise ValueError('Need at least one sample')
    u = sampler_q(n, rng)
    log_ratio = np.asarray(log_p(u), dtype=np.float64) - np.asarray(log_q(u), dtype=np.float64)
    if not np.all(np.isfinite(log_ratio)):
        raise NonFiniteError('Density ratio is not finite on some samples of q')

    terms = 4.0 * log_ratio
    log_mean = float(scipy.special.logsumexp(terms) - math.log(n))

    if n > 1:
        scaled = np.exp(terms - terms.max())
        rel_stderr = float(np.std(scaled, ddof=1) / (np.mean(scaled) * math.sqrt(n)))
        if rel_stderr > RENYI_MAX_RELATIVE_STDERR:
            raise DivergentEstimateError(
                f'D4 estimate does not converge (relative standard error {rel_stderr:.3f})',
                relative_stderr=rel_stderr)
    return log_mean / 3.0


def renyi4_grid(log_p: Callable[[np.ndarray], np.ndarray], log_q: Callable[[np.ndarray], np.ndarray],
                lo=-12.0, hi=12.0, nodes=100_000) -> float:
    '''D4(p||q) of 1-dim densities by the trapezoid rule on [lo, hi]

    Integrates p^4 / q^3, the integrand of E_q[(p/q)^4].
    '''
    u = np.linspace(lo, hi, nodes)
    log_integrand = 4.0 * np.asarray(log_p(u)) - 3.0 * np.asarray(log_q(u))
    shift = float(log_integrand.max())
    integral = scipy.integrate.trapezoid(np.exp(log_integrand - shift), u)
    return (math.log(integral) + shift) / 3.0


def gaussian_logpdf(mean, cov) -> Callable[[np.ndarray], np.ndarray]:
    '''Log-density function of N(mean, cov)

    For a 1-dim Gaussian the function accepts points of shape (n,) or (n, 1);
    otherwise rows of shape (n, d).
    '''
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    cholesky(cov, 'cov')
    return scipy.stats.multivariate_normal(np.atleast_1d(mean), cov).logpdf
