'''Sample complexity of importance-sampling flow matching on a static target

A fresh flow is fitted to a Gaussian target N(m, v I) from N fixed samples of
a sampling distribution N(0, s^2 I), weighted by the density ratio. The fit
is scored by the squared 2-Wasserstein distance between the moments of the
trained flow and the target. The sweep crosses sample sizes with sampling
widths and repeats every cell over several seeds; the fourth-order Renyi
divergence between target and sampling distribution is reported per width.
'''
from __future__ import annotations
import csv
import logging
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TextIO
from tqdm import tqdm
from . import ISFM_BENCH_COLUMNS
from .autodiff_net import AdamState, adam_step, init_mlp
from .errors import DivergentEstimateError
from .flow_matching import MC_PAIRS, WeightedBatch, importance_weights, isfm_loss_and_grad
from .flow_policy import EVAL_ODE_STEPS, FlowPolicy, push_forward
from .linalg import min_eigenvalue
from .lqr import gaussian_logpdf, renyi4_grid, renyi4_mc, w2_gaussians


log = logging.getLogger(__name__)

DIVERGENT = 'divergent'


@dataclass(frozen=True)
class BenchConfig:
    action_dim: int = 1
    target_mean: float = 1.0
    target_var: float = 0.25
    sampling_sigmas: tuple[float, ...] = (1.0, 2.0, 4.0)
    sample_sizes: tuple[int, ...] = (64, 256, 1024)
    seeds: int = 5
    steps: int = 2000
    learning_rate: float = 5e-3
    eval_samples: int = 10_000
    d4_samples: int = 100_000
    hidden_sizes: tuple[int, ...] = (64, 64)
    mc_pairs: int = MC_PAIRS

    @property
    def target(self) -> tuple[np.ndarray, np.ndarray]:
        return np.full(self.action_dim, self.target_mean), self.target_var * np.eye(self.action_dim)


@dataclass(frozen=True, eq=False)
class StaticFit:
    policy: FlowPolicy
    mean: np.ndarray
    cov: np.ndarray
    w2sq: float


def fit_static_target(target_mean, target_cov, sampling_sigma: float, n: int, seed, steps=2000,
                      learning_rate=5e-3, hidden_sizes=(64, 64), mc_pairs=MC_PAIRS, eval_samples=10_000) -> StaticFit:
    '''Fit a state-free flow to N(target_mean, target_cov) from n samples of N(0, sampling_sigma^2 I)'''
    mean = np.atleast_1d(np.asarray(target_mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(target_cov, dtype=np.float64))
    d = mean.size
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_rng, data_rng, condot_rng, eval_rng = [np.random.default_rng(s) for s in ss.spawn(4)]

    u = sampling_sigma * data_rng.standard_normal((n, d))
    log_q = gaussian_logpdf(np.zeros(d), sampling_sigma ** 2 * np.eye(d))(u)
    log_p = gaussian_logpdf(mean, cov)(u)
    batch = WeightedBatch(np.zeros(0), u, importance_weights(np.atleast_1d(log_p), np.atleast_1d(log_q), 1.0))

    theta = init_mlp([1 + d, *hidden_sizes, d], init_rng)
    adam = AdamState.create(theta, learning_rate)
    for _ in range(steps):
        _, grads = isfm_loss_and_grad(theta, batch, mc_pairs, condot_rng)
        theta, adam = adam_step(theta, grads, adam)

    policy = FlowPolicy(theta, 0, d, EVAL_ODE_STEPS)
    samples = push_forward(policy, np.zeros((eval_samples, 0)), eval_rng.standard_normal((eval_samples, d)))
    mu_hat = samples.mean(axis=0)
    cov_hat = np.atleast_2d(np.cov(samples, rowvar=False))
    return StaticFit(policy, mu_hat, cov_hat, w2_gaussians(mu_hat, cov_hat, mean, cov) ** 2)


def renyi4_to_sampling(config: BenchConfig, sigma: float, rng: np.random.Generator) -> float | str:
    '''D4(target || N(0, sigma^2 I)), or DIVERGENT when it is infinite

    For Gaussians E_q[(p/q)^4] is finite exactly when 4 cov_p^-1 - 3 cov_q^-1
    is positive definite.
    '''
    mean, cov = config.target
    d = config.action_dim
    if min_eigenvalue(4 * np.linalg.inv(cov) - 3 / sigma ** 2 * np.eye(d)) <= 0:
        return DIVERGENT

    log_p = gaussian_logpdf(mean, cov)
    log_q = gaussian_logpdf(np.zeros(d), sigma ** 2 * np.eye(d))
    if d == 1:
        return renyi4_grid(log_p, log_q)
    try:
        return renyi4_mc(log_p, log_q, lambda n, rng: sigma * rng.standard_normal((n, d)), config.d4_samples, rng)
    except DivergentEstimateError:
        return DIVERGENT


def run_isfm_bench(config: BenchConfig, seed: int, threads=1, progress=False) -> list[dict]:
    '''One row per (N, sampling sigma) cell, in sweep order'''
    cells = [(n, sigma) for n in config.sample_sizes for sigma in config.sampling_sigmas]
    seeds = np.random.SeedSequence(seed).spawn(len(cells) * config.seeds + 1)
    d4_rng = np.random.default_rng(seeds[-1])
    d4 = {sigma: renyi4_to_sampling(config, sigma, d4_rng) for sigma in config.sampling_sigmas}
    mean, cov = config.target

    def job(k):
        n, sigma = cells[k // config.seeds]
        return fit_static_target(mean, cov, sigma, n, seeds[k], config.steps, config.learning_rate,
                                 config.hidden_sizes, config.mc_pairs, config.eval_samples).w2sq

    jobs = range(len(cells) * config.seeds)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        w2sq = np.array(list(tqdm(pool.map(job, jobs), total=len(jobs), disable=not progress,
                                  desc='ISFM bench', unit='fit')))
    w2sq = w2sq.reshape(len(cells), config.seeds)

    rows = []
    for (n, sigma), values in zip(cells, w2sq):
        rows.append({
            'N'              : n,
            'sampling_sigma' : sigma,
            'D4_estimate'    : d4[sigma],
            'mean_W2sq'      : float(values.mean()),
            'std_W2sq'       : float(values.std(ddof=1)) if values.size > 1 else 0.0
        })
        log.info('N=%d sigma=%g: mean W2^2 %.5f', n, sigma, rows[-1]['mean_W2sq'])
    return rows


def write_bench_csv(rows: list[dict], f: TextIO):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(ISFM_BENCH_COLUMNS)
    for row in rows:
        writer.writerow([row[k] if isinstance(row[k], (int, str)) else repr(row[k]) for k in ISFM_BENCH_COLUMNS])
