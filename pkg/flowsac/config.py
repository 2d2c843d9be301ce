'''Run configuration

A configuration is a strict UTF-8 JSON object. Unknown keys are errors.
The system is either a named preset, optionally with gamma, sigma_w or the
initial state overridden, or explicit row-major matrices:

    {"seed": 1, "alpha": 1.0, "system": {"preset": "quickstart_2d"}}

    {"seed": 1, "system": {"A": [[1]], "B": [[1]], "Q": [[1]], "R": [[1]],
                           "gamma": 0.9, "sigma_w": [[1]]}}

SAC hyperparameters live at the top level. The evaluate and isfm-bench
subcommands read their settings from the "evaluate" and "bench" objects.
'''
from __future__ import annotations
import dataclasses
import json
import numpy as np
from dataclasses import dataclass, field
from marshmallow import Schema, fields as fld, ValidationError, validate, validates_schema
from .bench import BenchConfig
from .errors import ConfigError, DimensionError, NotPositiveDefiniteError, NonFiniteError
from .evaluate import EvalConfig
from .lqr import InitialState, LqrSystem
from .sac_isfm import SacConfig


def _cyclic_eq12() -> np.ndarray:
    return 0.55 * (np.eye(5) + np.roll(np.eye(5), 1, axis=1))


# name -> (A, B, Q, R, gamma, sigma_w, x0)
PRESETS = {
    'paper_eq12':    (_cyclic_eq12(), np.eye(5), np.eye(5), np.eye(5), 0.9, np.eye(5), np.zeros(5)),
    'quickstart_2d': (0.5 * np.eye(2), np.eye(2), np.eye(2), np.eye(2), 0.9, 0.01 * np.eye(2), np.zeros(2)),
    'scalar':        (np.eye(1), np.eye(1), np.eye(1), np.eye(1), 0.9, np.eye(1), np.ones(1)),
    'zero_dynamics': (np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2), 0.9, np.eye(2), np.zeros(2)),
}

MATRIX_KEYS = ('A', 'B', 'Q', 'R')


def preset_system(name: str, alpha=1.0, gamma: float | None = None, sigma_w=None,
                  init_state: InitialState | None = None) -> LqrSystem:
    try:
        A, B, Q, R, g, S, x0 = PRESETS[name]
    except KeyError:
        raise ConfigError(f'Unknown system preset "{name}"', key='system.preset')
    return LqrSystem(A, B, Q, R, g if gamma is None else gamma, S if sigma_w is None else sigma_w, alpha,
                     InitialState(x0) if init_state is None else init_state)


def _matrix(**kwargs):
    return fld.List(fld.List(fld.Float(allow_nan=False)), **kwargs)


class InitialStateSchema(Schema):
    mean = fld.List(fld.Float(allow_nan=False), required=True)
    cov  = _matrix(load_default=None)


class SystemSchema(Schema):
    preset     = fld.Str(validate=validate.OneOf(list(PRESETS)))
    A          = _matrix()
    B          = _matrix()
    Q          = _matrix()
    R          = _matrix()
    gamma      = fld.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    sigma_w    = _matrix()
    init_state = fld.Nested(InitialStateSchema)

    @validates_schema
    def check_complete(self, data, **kwargs):
        if 'preset' in data:
            for key in MATRIX_KEYS:
                if key in data:
                    raise ValidationError('Matrices cannot be combined with a preset', key)
        else:
            for key in (*MATRIX_KEYS, 'gamma', 'sigma_w'):
                if key not in data:
                    raise ValidationError('Missing data for required field.', key)


class EvaluateSchema(Schema):
    n_traj           = fld.Integer(load_default=50, validate=validate.Range(min=1))
    traj_len         = fld.Integer(load_default=100, validate=validate.Range(min=1))
    n_action_samples = fld.Integer(load_default=12800, validate=validate.Range(min=2))


class BenchSchema(Schema):
    action_dim      = fld.Integer(load_default=1, validate=validate.OneOf([1, 2]))
    target_mean     = fld.Float(load_default=1.0)
    target_var      = fld.Float(load_default=0.25, validate=validate.Range(min=0, min_inclusive=False))
    sampling_sigmas = fld.List(fld.Float(validate=validate.Range(min=0, min_inclusive=False)),
                               load_default=[1.0, 2.0, 4.0], validate=validate.Length(min=1))
    sample_sizes    = fld.List(fld.Integer(validate=validate.Range(min=1)),
                               load_default=[64, 256, 1024], validate=validate.Length(min=1))
    seeds           = fld.Integer(load_default=5, validate=validate.Range(min=1))
    steps           = fld.Integer(load_default=2000, validate=validate.Range(min=0))
    learning_rate   = fld.Float(load_default=5e-3, validate=validate.Range(min=0, min_inclusive=False))
    eval_samples    = fld.Integer(load_default=10_000, validate=validate.Range(min=2))
    d4_samples      = fld.Integer(load_default=100_000, validate=validate.Range(min=2))


def _count(default, minimum=1):
    return fld.Integer(load_default=default, validate=validate.Range(min=minimum))


class TrainConfigSchema(Schema):
    seed       = fld.Integer(required=True)
    system     = fld.Nested(SystemSchema, required=True)
    alpha      = fld.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))
    output_dir = fld.Str(load_default='runs/flowsac', validate=validate.Length(min=1))
    evaluate   = fld.Nested(EvaluateSchema, load_default=lambda: EvaluateSchema().load({}))
    bench      = fld.Nested(BenchSchema, load_default=lambda: BenchSchema().load({}))

    episodes          = _count(20_000, minimum=0)
    buffer_capacity   = _count(100_000)
    batch_size        = _count(64)
    n_actions         = _count(16)
    learning_rate_q   = fld.Float(load_default=1e-3, validate=validate.Range(min=0, min_inclusive=False))
    learning_rate_pi  = fld.Float(load_default=3e-4, validate=validate.Range(min=0, min_inclusive=False))
    polyak_tau        = fld.Float(load_default=0.005, validate=validate.Range(min=0, max=1, min_inclusive=False))
    segment_length    = _count(10)
    reset_every       = _count(100)
    state_clip        = fld.Float(load_default=100.0, validate=validate.Range(min=0, min_inclusive=False))
    eval_every        = _count(500)
    eval_trajectories = _count(100)
    eval_horizon      = _count(100)
    train_ode_steps   = _count(16)
    eval_ode_steps    = _count(64)
    mc_pairs          = _count(4)
    hidden_sizes      = fld.List(fld.Integer(validate=validate.Range(min=1)), load_default=[64, 64],
                                 validate=validate.Length(min=1))
    use_target_policy_for_eval_actions = fld.Boolean(load_default=False)
    critic_warmup     = _count(2000, minimum=0)


SAC_KEYS = [f.name for f in dataclasses.fields(SacConfig)]


@dataclass(frozen=True, eq=False)
class TrainConfig:
    system: LqrSystem
    seed: int
    output_dir: str
    sac: SacConfig = field(default_factory=SacConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def alpha(self) -> float:
        return self.system.alpha

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None,
                       alpha: float | None = None) -> TrainConfig:
        if alpha is not None and not alpha > 0:
            raise ConfigError(f'alpha must be positive, got {alpha}', key='alpha')
        return dataclasses.replace(
            self,
            seed=self.seed if seed is None else seed,
            output_dir=self.output_dir if output_dir is None else output_dir,
            system=self.system if alpha is None else self.system.with_alpha(alpha))


def _first_error(messages, prefix='') -> tuple[str, str]:
    if isinstance(messages, dict):
        key, value = next(iter(messages.items()))
        path = f'{prefix}.{key}' if prefix else str(key)
        return _first_error(value, path)
    if isinstance(messages, list) and messages and isinstance(messages[0], (dict, list)):
        return _first_error(messages[0], prefix)
    text = messages[0] if isinstance(messages, list) and messages else str(messages)
    return prefix, text


def _build_system(data: dict, alpha: float) -> LqrSystem:
    init = data.get('init_state')
    init = None if init is None else InitialState(np.asarray(init['mean'], dtype=np.float64),
                                                  None if init['cov'] is None else np.asarray(init['cov']))
    try:
        if 'preset' in data:
            return preset_system(data['preset'], alpha, data.get('gamma'), data.get('sigma_w'), init)
        return LqrSystem(*(np.asarray(data[k], dtype=np.float64) for k in MATRIX_KEYS), data['gamma'],
                         np.asarray(data['sigma_w'], dtype=np.float64), alpha, init)
    except (DimensionError, NotPositiveDefiniteError, NonFiniteError, ValueError) as e:
        raise ConfigError(f'system: {e}', key='system') from e


def config_from_dict(data: dict) -> TrainConfig:
    try:
        values = TrainConfigSchema().load(data)
    except ValidationError as e:
        key, text = _first_error(e.messages)
        raise ConfigError(f'Invalid configuration key "{key}": {text}', key=key) from e

    sac = {k: values[k] for k in SAC_KEYS}
    sac['hidden_sizes'] = tuple(sac['hidden_sizes'])
    bench = dict(values['bench'])
    bench['sampling_sigmas'] = tuple(bench['sampling_sigmas'])
    bench['sample_sizes'] = tuple(bench['sample_sizes'])

    return TrainConfig(
        system=_build_system(values['system'], values['alpha']),
        seed=values['seed'],
        output_dir=values['output_dir'],
        sac=SacConfig(**sac),
        evaluation=EvalConfig(**values['evaluate']),
        bench=BenchConfig(**bench))


def load_config(path: str) -> TrainConfig:
    '''Parse and validate a JSON configuration file'''
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f'{path} is not valid UTF-8 JSON: {e}') from e

    if not isinstance(data, dict):
        raise ConfigError(f'{path} must contain a JSON object')
    return config_from_dict(data)
