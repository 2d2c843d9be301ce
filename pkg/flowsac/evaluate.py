'''Distance of a trained policy to the optimal max-entropy LQR policy

Trajectories are rolled out with the policy under test. At every visited
state many actions are drawn, their sample mean and covariance are compared
with the optimal N(-K* x, sigma*) in the spectral norm, and one of the drawn
actions advances the trajectory.
'''
from __future__ import annotations
import csv
import logging
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TextIO
from . import EVAL_SUMMARY_COLUMNS
from .errors import DimensionError
from .flow_policy import Flow, push_forward
from .lqr import GaussianPolicy, LqrSystem, env_step
from .oracle import RiccatiSolution


log = logging.getLogger(__name__)

STATE_COLUMNS = ['trajectory', 'step', 'mean_dist', 'cov_dist']


@dataclass(frozen=True)
class EvalConfig:
    n_traj: int = 50
    traj_len: int = 100
    n_action_samples: int = 12800


@dataclass
class EvalReport:
    alpha: float
    state_dim: int
    # (trajectory, step, x, mean_dist, cov_dist)
    states: list[tuple[int, int, np.ndarray, float, float]] = field(default_factory=list)

    @property
    def mean_dists(self) -> np.ndarray:
        return np.array([s[3] for s in self.states])

    @property
    def cov_dists(self) -> np.ndarray:
        return np.array([s[4] for s in self.states])

    def summary(self) -> dict:
        m, c = self.mean_dists, self.cov_dists
        return {
            'alpha'          : self.alpha,
            'n_states'       : len(self.states),
            'mean_dist_mean' : float(np.mean(m)),
            'mean_dist_std'  : float(np.std(m)),
            'cov_dist_mean'  : float(np.mean(c)),
            'cov_dist_std'   : float(np.std(c))
        }

    def write_states(self, f: TextIO):
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(STATE_COLUMNS[:2] + [f'x{i}' for i in range(self.state_dim)] + STATE_COLUMNS[2:])
        for traj, step, x, md, cd in self.states:
            writer.writerow([traj, step, *(repr(float(v)) for v in x), repr(md), repr(cd)])

    def write_summary(self, f: TextIO):
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(EVAL_SUMMARY_COLUMNS)
        summary = self.summary()
        writer.writerow([repr(summary[k]) for k in EVAL_SUMMARY_COLUMNS])


ActionSampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def action_sampler(policy: Flow | GaussianPolicy) -> ActionSampler:
    '''Function drawing n actions (n, d_u) at a single state row x (1, d_x)'''
    if isinstance(policy, GaussianPolicy):
        return lambda x, n, rng: policy.sample(np.repeat(x, n, axis=0), rng)
    return lambda x, n, rng: push_forward(policy, x, rng.standard_normal((n, policy.action_dim)))


def action_moments(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return u.mean(axis=0), np.atleast_2d(np.cov(u, rowvar=False))


def _rollout(sys: LqrSystem, sample: ActionSampler, optimum: RiccatiSolution, config: EvalConfig,
             index: int, seed: np.random.SeedSequence):
    rng = np.random.default_rng(seed)
    target = optimum.policy
    x = sys.init_state.sample(1, rng)
    rows = []
    for step in range(config.traj_len):
        u = sample(x, config.n_action_samples, rng)
        mu, cov = action_moments(u)
        mean_dist = float(np.linalg.norm(mu - target.mean(x[0])))
        cov_dist = float(np.linalg.norm(cov - optimum.sigma, 2))
        rows.append((index, step, x[0].copy(), mean_dist, cov_dist))
        x = env_step(sys, x, u[:1], rng).x_next
    return rows


def evaluate_policy(sys: LqrSystem, policy: Flow | GaussianPolicy, optimum: RiccatiSolution, config: EvalConfig,
                    seed: int, threads=1) -> EvalReport:
    '''Per-state mean and covariance distances of policy to the optimum

    Every trajectory has its own random stream spawned from seed, so the
    result does not depend on the number of worker threads.
    '''
    if config.n_action_samples < 2:
        raise ValueError('The action covariance needs at least 2 action samples per state')
    if (policy.state_dim, policy.action_dim) != (sys.state_dim, sys.action_dim):
        raise DimensionError(f'Policy dimensions ({policy.state_dim}, {policy.action_dim}) do not match '
                             f'the system ({sys.state_dim}, {sys.action_dim})')

    sample = action_sampler(policy)
    seeds = np.random.SeedSequence(seed).spawn(config.n_traj)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        trajectories = pool.map(lambda i: _rollout(sys, sample, optimum, config, i, seeds[i]), range(config.n_traj))
        report = EvalReport(sys.alpha, sys.state_dim, [row for rows in trajectories for row in rows])

    log.info('Evaluated %d states: mean distance %.4f, covariance distance %.4f',
             len(report.states), report.mean_dists.mean(), report.cov_dists.mean())
    return report
