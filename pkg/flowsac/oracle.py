'''Closed-form ground truth for max-entropy LQR

For a Gaussian policy N(-K x, sigma_u) the soft value is -x'Px - c, where P
solves the discounted Lyapunov equation

    P = Q + K'RK + gamma (A - BK)' P (A - BK)

and c = (tr((R + gamma B'PB) sigma_u) - alpha H(sigma_u) + gamma tr(P sigma_w)) / (1 - gamma).
Boltzmann improvement of that policy is again Gaussian, with gain
gamma (R + gamma B'PB)^-1 B'PA and covariance (alpha/2) (R + gamma B'PB)^-1. The
optimal policy is the fixed point, found here by Riccati value iteration.
'''
from __future__ import annotations
import logging
import math
import numpy as np
from dataclasses import dataclass
from .errors import ConvergenceError, UnstableClosedLoopError
from .linalg import Matrix, min_eigenvalue, solve_spd, spectral_radius, symmetrize
from .lqr import GaussianPolicy, LqrSystem, gaussian_entropy


log = logging.getLogger(__name__)

RICCATI_TOL = 1e-10
SPI_TOL = 1e-8
MAX_ITER = 100_000

# Allowed negative eigenvalue of P^k - P^(k+1) along soft policy iteration.
MONOTONE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P: Matrix
    K: Matrix
    sigma: Matrix
    c: float
    iterations: int = 0

    @property
    def policy(self) -> GaussianPolicy:
        return GaussianPolicy(self.K, self.sigma)


@dataclass(frozen=True, eq=False)
class SoftQCoefficients:
    '''Q(x, u) = -x'M_xx x - u'M_uu u - 2 x'M_xu u - const'''
    M_xx: Matrix
    M_uu: Matrix
    M_xu: Matrix
    const: float

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        value = -(np.einsum('...i,ij,...j->...', x, self.M_xx, x)
                  + np.einsum('...i,ij,...j->...', u, self.M_uu, u)
                  + 2.0 * np.einsum('...i,ij,...j->...', x, self.M_xu, u)) - self.const
        return float(value) if np.ndim(value) == 0 else value


def closed_loop_radius(sys: LqrSystem, K: Matrix) -> float:
    '''sqrt(gamma) * rho(A - B K); the gain is admissible when this is below 1'''
    return math.sqrt(sys.gamma) * spectral_radius(sys.A - sys.B @ K)


def entropy_constant(sys: LqrSystem, P: Matrix, sigma_u: Matrix, include_entropy=True) -> float:
    '''The constant c of the soft value -x'Px - c for a policy with covariance sigma_u'''
    G = sys.R + sys.gamma * sys.B.T @ P @ sys.B
    total = np.trace(G @ sigma_u) + sys.gamma * np.trace(P @ sys.sigma_w)
    if include_entropy:
        total -= sys.alpha * gaussian_entropy(sigma_u)
    return float(total / (1 - sys.gamma))


def riccati_residual(sys: LqrSystem, P: Matrix, K: Matrix) -> float:
    '''Frobenius residual of P = Q + K'RK + gamma (A-BK)'P(A-BK)'''
    Acl = sys.A - sys.B @ K
    rhs = sys.Q + K.T @ sys.R @ K + sys.gamma * Acl.T @ P @ Acl
    return float(np.linalg.norm(rhs - P, 'fro'))


def policy_improve_exact(sys: LqrSystem, P: Matrix) -> GaussianPolicy:
    '''Boltzmann improvement of any policy whose value matrix is P'''
    G = sys.R + sys.gamma * sys.B.T @ P @ sys.B
    K = sys.gamma * solve_spd(G, sys.B.T @ P @ sys.A)
    sigma = symmetrize(0.5 * sys.alpha * solve_spd(G, np.eye(sys.action_dim)))
    return GaussianPolicy(K, sigma)


def riccati_sweep(sys: LqrSystem, P: Matrix) -> Matrix:
    '''One value iteration step P <- Q + gamma A'PA - gamma^2 A'PB (R + gamma B'PB)^-1 B'PA'''
    A, B, Q, R, gamma = sys.A, sys.B, sys.Q, sys.R, sys.gamma
    PA = P @ A
    G = R + gamma * B.T @ P @ B
    return symmetrize(Q + gamma * A.T @ PA - gamma ** 2 * PA.T @ B @ solve_spd(G, B.T @ PA))


def _solution(sys: LqrSystem, P: Matrix, iterations: int) -> RiccatiSolution:
    policy = policy_improve_exact(sys, P)
    return RiccatiSolution(P, policy.K, policy.sigma, entropy_constant(sys, P, policy.sigma), iterations)


def riccati_value_iteration(sys: LqrSystem, tol=RICCATI_TOL, max_iter=MAX_ITER) -> RiccatiSolution:
    '''Solve the discounted Riccati equation by value iteration from P = Q

    Raises ConvergenceError when the iteration does not settle within
    max_iter sweeps, which happens when (sqrt(gamma) A, sqrt(gamma) B) is not
    stabilizable.
    '''
    P = np.array(sys.Q)
    for i in range(1, max_iter + 1):
        P_next = riccati_sweep(sys, P)
        if not np.all(np.isfinite(P_next)):
            raise ConvergenceError(f'Riccati iteration diverged after {i} sweeps; the system is not stabilizable')
        delta = np.linalg.norm(P_next - P, 'fro')
        P = P_next
        if delta < tol:
            break
    else:
        raise ConvergenceError(f'Riccati iteration did not converge in {max_iter} sweeps '
                               f'(last change {delta:.3e}); the system may not be stabilizable')

    log.debug('Riccati value iteration converged after %d sweeps', i)
    return _solution(sys, P, i)


def riccati_warm_start(sys: LqrSystem, sweeps=3) -> RiccatiSolution:
    '''Greedy policy after a fixed number of value iteration sweeps from P = Q

    No convergence is required, so the result is a starting point for soft
    policy iteration rather than the optimum. Its gain is not guaranteed to
    stabilize the system.
    '''
    if sweeps < 1:
        raise ValueError('A warm start needs at least one sweep')
    P = np.array(sys.Q)
    for _ in range(sweeps):
        P = riccati_sweep(sys, P)
    if not np.all(np.isfinite(P)):
        raise ConvergenceError(f'Riccati iteration diverged within {sweeps} sweeps')
    return _solution(sys, P, sweeps)


def lyapunov_fixed_gain(sys: LqrSystem, policy: GaussianPolicy, tol=RICCATI_TOL, max_iter=MAX_ITER) -> RiccatiSolution:
    '''Soft policy evaluation of a Gaussian policy

    Iterates P <- Q + K'RK + gamma (A-BK)'P(A-BK) from P = Q and computes the
    constant c for the policy's own covariance.
    '''
    radius = closed_loop_radius(sys, policy.K)
    if radius >= 1:
        raise UnstableClosedLoopError(
            f'Gain is not stabilizing: sqrt(gamma) * rho(A - BK) = {radius:.6f} >= 1', radius=radius)

    K = policy.K
    Acl = sys.A - sys.B @ K
    QK = sys.Q + K.T @ sys.R @ K
    P = np.array(sys.Q)
    for i in range(1, max_iter + 1):
        P_next = symmetrize(QK + sys.gamma * Acl.T @ P @ Acl)
        delta = np.linalg.norm(P_next - P, 'fro')
        P = P_next
        if delta < tol:
            break
    else:
        raise ConvergenceError(f'Lyapunov iteration did not converge in {max_iter} sweeps (last change {delta:.3e})')

    return RiccatiSolution(P, K, policy.sigma, entropy_constant(sys, P, policy.sigma), i)


def soft_q_coefficients(sys: LqrSystem, policy: GaussianPolicy) -> SoftQCoefficients:
    sol = lyapunov_fixed_gain(sys, policy)
    P, g = sol.P, sys.gamma
    return SoftQCoefficients(
        M_xx=symmetrize(sys.Q + g * sys.A.T @ P @ sys.A),
        M_uu=symmetrize(sys.R + g * sys.B.T @ P @ sys.B),
        M_xu=g * sys.A.T @ P @ sys.B,
        const=g * (sol.c + float(np.trace(P @ sys.sigma_w))))


def soft_q(sys: LqrSystem, policy: GaussianPolicy, x: np.ndarray, u: np.ndarray):
    '''Soft Q function of a Gaussian policy at (x, u); rows are broadcast'''
    return soft_q_coefficients(sys, policy)(x, u)


def _quadratic_expectation(sys: LqrSystem, P: Matrix, x: np.ndarray | None) -> float:
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        return float(x @ P @ x)
    init = sys.init_state
    value = float(init.mean @ P @ init.mean)
    if init.cov is not None:
        value += float(np.trace(P @ init.cov))
    return value


def soft_value(sys: LqrSystem, policy: GaussianPolicy, x: np.ndarray | None = None) -> float:
    '''Entropy-regularized return -x'Px - c; the initial state law when x is None'''
    sol = lyapunov_fixed_gain(sys, policy)
    return -_quadratic_expectation(sys, sol.P, x) - sol.c


def unregularized_value(sys: LqrSystem, policy: GaussianPolicy, x: np.ndarray | None = None) -> float:
    '''Discounted LQR return without the entropy bonus'''
    sol = lyapunov_fixed_gain(sys, policy)
    return -_quadratic_expectation(sys, sol.P, x) - entropy_constant(sys, sol.P, policy.sigma, include_entropy=False)


def spi_exact(sys: LqrSystem, policy0: GaussianPolicy, iters=50, tol=SPI_TOL) -> list[GaussianPolicy]:
    '''Exact soft policy iteration on Gaussian policies

    Returns the policy sequence starting with policy0. Stops after iters
    improvements or once consecutive gains differ by less than tol in
    Frobenius norm. Raises ConvergenceError when an iterate's value matrix
    grows, i.e. P_k - P_k+1 has an eigenvalue below -MONOTONE_SLACK.
    '''
    radius = closed_loop_radius(sys, policy0.K)
    if radius >= 1:
        raise UnstableClosedLoopError(
            f'Initial gain is not stabilizing: sqrt(gamma) * rho(A - BK) = {radius:.6f} >= 1', radius=radius)

    policies = [policy0]
    previous = None
    for k in range(iters):
        sol = lyapunov_fixed_gain(sys, policies[-1])
        if previous is not None:
            gap = min_eigenvalue(previous - sol.P)
            if gap < -MONOTONE_SLACK:
                raise ConvergenceError(f'Soft policy iteration {k} increased the value matrix '
                                       f'(min eigenvalue of P_k - P_k+1 is {gap:.3e})')
        previous = sol.P

        improved = policy_improve_exact(sys, sol.P)
        policies.append(improved)
        if np.linalg.norm(improved.K - policies[-2].K, 'fro') < tol:
            break

    log.info('Soft policy iteration stopped after %d improvements', len(policies) - 1)
    return policies
