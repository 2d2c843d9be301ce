from __future__ import annotations
import json
import logging
import os
import sys
import click
import numpy as np
from tabulate import tabulate
from . import ISFM_BENCH_COLUMNS, EVAL_SUMMARY_COLUMNS
from .bench import run_isfm_bench, write_bench_csv
from .checkpoint import load_policy, save_policy
from .config import TrainConfig, load_config
from .errors import ConfigError, FlowSacError, TrainingAborted
from .evaluate import EvalConfig, evaluate_policy
from .lqr import discounted_return
from .oracle import closed_loop_radius, riccati_residual, riccati_value_iteration, unregularized_value
from .sac_isfm import SacState, train


log = logging.getLogger(__name__)


class FlowSacGroup(click.Group):
    '''Command group that maps package errors and usage errors to exit codes

    Usage and configuration errors exit with status 1, numerical failures
    with status 2.
    '''
    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except FlowSacError as e:
            error = click.ClickException(str(e))
            error.exit_code = e.exit_code
            raise error from e


def prepare_output_dir(path: str) -> str:
    if os.path.isdir(path) and os.listdir(path):
        raise ConfigError(f'Output directory {path} is not empty, refusing to overwrite it', key='output_dir')
    os.makedirs(path, exist_ok=True)
    return path


def config_options(f):
    f = click.option('--alpha', type=float, help='Override the entropy temperature of the config')(f)
    f = click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory (overrides output_dir)')(f)
    f = click.option('--seed', '-s', type=int, help='Random seed (overrides the config seed)')(f)
    f = click.option('--config', '-c', 'config_path', envvar='FLOWSAC_CONFIG', required=True,
                     type=click.Path(exists=True, dir_okay=False), help='JSON configuration file')(f)
    return f


def _load(config_path, seed, out, alpha) -> TrainConfig:
    click.echo(f'Loading configuration {config_path}...', err=True)
    return load_config(config_path).with_overrides(seed=seed, output_dir=out, alpha=alpha)


def _tolist(a: np.ndarray) -> list:
    return np.asarray(a).tolist()


@click.group(cls=FlowSacGroup, help='Max-entropy reinforcement learning with flow policies')
@click.option('--log-level', '-l', envvar='FLOWSAC_LOG_LEVEL', default='WARNING', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False), help='Logging level')
@click.option('--threads', '-t', envvar='FLOWSAC_THREADS', type=click.IntRange(min=1), default=1, show_default=True,
              help='Maximum number of worker threads')
@click.option('--progress/--no-progress', default=True, help='Show progress bars', show_default=True)
@click.pass_context
def cli(ctx, log_level, threads, progress):
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s')
    ctx.ensure_object(dict)
    ctx.obj['threads'] = threads
    ctx.obj['progress'] = progress


def oracle_report(config: TrainConfig) -> dict:
    '''Optimal policy of the configured system and its returns'''
    sys_ = config.system
    sol = riccati_value_iteration(sys_)
    policy = sol.policy
    mean, stderr = discounted_return(sys_, lambda x, rng: policy.sample(x, rng), config.sac.eval_horizon,
                                     config.sac.eval_trajectories, np.random.default_rng(config.seed))
    return {
        'alpha'                      : sys_.alpha,
        'gamma'                      : sys_.gamma,
        'P'                          : _tolist(sol.P),
        'K'                          : _tolist(sol.K),
        'Sigma'                      : _tolist(sol.sigma),
        'c'                          : sol.c,
        'optimal_return'             : mean,
        'optimal_return_stderr'      : stderr,
        'optimal_return_closed_form' : unregularized_value(sys_, policy),
        'riccati_residual'           : riccati_residual(sys_, sol.P, sol.K),
        'closed_loop_radius'         : closed_loop_radius(sys_, sol.K),
        'iterations'                 : sol.iterations
    }


@cli.command('oracle', help='Solve the max-entropy LQR problem in closed form')
@config_options
def cmd_oracle(config_path, seed, out, alpha):
    config = _load(config_path, seed, out, alpha)
    text = json.dumps(oracle_report(config), indent=2)
    if out is not None:
        path = os.path.join(prepare_output_dir(out), 'oracle.json')
        click.echo(f'Writing oracle solution to {path}', err=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
    click.echo(text)


@cli.command('train', help='Train a flow policy with SAC-ISFM')
@config_options
@click.pass_obj
def cmd_train(obj, config_path, seed, out, alpha):
    config = _load(config_path, seed, out, alpha)
    out = prepare_output_dir(config.output_dir)

    def checkpoint(episode: int, state: SacState):
        path = os.path.join(out, f'episode-{episode:07d}.ckpt')
        save_policy(path, state.policy(config.sac.eval_ode_steps), episode, config.alpha)
        log.info('Wrote checkpoint %s', path)

    try:
        result = train(config.system, config.sac, config.seed, progress=obj['progress'], on_evaluation=checkpoint)
    except TrainingAborted as e:
        path = os.path.join(out, 'abort.json')
        click.echo(f'Writing diagnostic snapshot to {path}', err=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(e.snapshot, f, indent=2)
        raise

    path = os.path.join(out, 'train_log.csv')
    click.echo(f'Writing training log to {path}', err=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        result.to_csv(f)

    state = result.final_state
    save_policy(os.path.join(out, 'final.ckpt'), state.policy(config.sac.eval_ode_steps), state.episode, config.alpha)
    click.echo(f'Wrote final checkpoint to {os.path.join(out, "final.ckpt")}', err=True)


@cli.command('evaluate', help='Compare a checkpointed policy with the optimal policy')
@config_options
@click.option('--checkpoint', '-k', required=True, type=click.Path(exists=True, dir_okay=False), help='Policy checkpoint')
@click.option('--n-traj', type=click.IntRange(min=1), help='Number of trajectories')
@click.option('--traj-len', type=click.IntRange(min=1), help='Trajectory length')
@click.option('--n-action-samples', type=click.IntRange(min=2), help='Actions drawn per visited state (at least 2)')
@click.pass_obj
def cmd_evaluate(obj, config_path, seed, out, alpha, checkpoint, n_traj, traj_len, n_action_samples):
    config = _load(config_path, seed, out, alpha)
    defaults = config.evaluation
    settings = EvalConfig(n_traj or defaults.n_traj, traj_len or defaults.traj_len,
                          n_action_samples or defaults.n_action_samples)

    click.echo(f'Loading checkpoint {checkpoint}...', err=True)
    policy = load_policy(checkpoint)
    out = prepare_output_dir(config.output_dir)

    optimum = riccati_value_iteration(config.system)
    report = evaluate_policy(config.system, policy, optimum, settings, config.seed, obj['threads'])

    for name, write in (('eval_states.csv', report.write_states), ('eval_summary.csv', report.write_summary)):
        path = os.path.join(out, name)
        click.echo(f'Writing {path}', err=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            write(f)

    summary = report.summary()
    click.echo(tabulate([[summary[k] for k in EVAL_SUMMARY_COLUMNS]], headers=EVAL_SUMMARY_COLUMNS, tablefmt='psql'))


@cli.command('isfm-bench', help='Sample complexity sweep of importance-sampling flow matching')
@config_options
@click.pass_obj
def cmd_isfm_bench(obj, config_path, seed, out, alpha):
    config = _load(config_path, seed, out, alpha)
    out = prepare_output_dir(config.output_dir)
    rows = run_isfm_bench(config.bench, config.seed, obj['threads'], obj['progress'])

    path = os.path.join(out, 'isfm_bench.csv')
    click.echo(f'Writing {path}', err=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        write_bench_csv(rows, f)
    click.echo(tabulate([[r[k] for k in ISFM_BENCH_COLUMNS] for r in rows], headers=ISFM_BENCH_COLUMNS, tablefmt='psql'))


def main():
    cli(prog_name='flowsac')


if __name__ == '__main__':
    main()
