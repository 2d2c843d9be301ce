'''Policy checkpoints

A checkpoint is a single UTF-8 JSON document. The header fields describe the
policy and every tensor is stored as base64-encoded little-endian float64
bytes together with its shape:

    {
      "format": "flowsac-checkpoint", "version": 1, "kind": "flow",
      "flowsac_version": "0.1.0", "state_dim": 2, "action_dim": 2,
      "activation": "tanh", "ode_steps": 64, "episode": 500, "alpha": 1.0,
      "tensors": [{"name": "layers.0.weight", "shape": [64, 5], "data": "..."}, ...]
    }

Checkpoints of kind "gaussian" hold the tensors "K" and "sigma" of a
Gaussian policy instead of network layers.
'''
from __future__ import annotations
import base64
import binascii
import json
import numpy as np
from typing import Any
from . import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, __version__
from .autodiff_net import Layer, MlpParams
from .errors import CheckpointError, FlowSacError
from .flow_policy import EVAL_ODE_STEPS, FlowPolicy
from .lqr import GaussianPolicy

LE_FLOAT64 = np.dtype('<f8')


def encode_tensor(name: str, value: np.ndarray) -> dict:
    value = np.ascontiguousarray(value, dtype=LE_FLOAT64)
    return {
        'name'  : name,
        'shape' : list(value.shape),
        'data'  : base64.b64encode(value.tobytes()).decode('ascii')
    }


def decode_tensor(item: dict) -> tuple[str, np.ndarray]:
    try:
        name, shape = item['name'], tuple(int(d) for d in item['shape'])
        raw = base64.b64decode(item['data'], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise CheckpointError(f'Malformed tensor entry: {e}') from e

    if len(raw) != LE_FLOAT64.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f'Tensor "{name}" holds {len(raw)} bytes, which does not match shape {list(shape)}')
    return name, np.frombuffer(raw, dtype=LE_FLOAT64).astype(np.float64).reshape(shape)


def _header(kind: str, state_dim: int, action_dim: int, **extra) -> dict[str, Any]:
    return {
        'format'          : CHECKPOINT_FORMAT,
        'version'         : CHECKPOINT_VERSION,
        'kind'            : kind,
        'flowsac_version' : __version__,
        'state_dim'       : state_dim,
        'action_dim'      : action_dim,
        **extra
    }


def flow_to_dict(policy: FlowPolicy, episode=0, alpha: float | None = None) -> dict:
    doc = _header('flow', policy.state_dim, policy.action_dim, activation=policy.net.activation,
                  ode_steps=policy.ode_steps, episode=episode, alpha=alpha)
    doc['tensors'] = [encode_tensor(f'layers.{i}.{part}', getattr(layer, part))
                      for i, layer in enumerate(policy.net.layers) for part in ('weight', 'bias')]
    return doc


def gaussian_to_dict(policy: GaussianPolicy, alpha: float | None = None) -> dict:
    doc = _header('gaussian', policy.state_dim, policy.action_dim, alpha=alpha)
    doc['tensors'] = [encode_tensor('K', policy.K), encode_tensor('sigma', policy.sigma)]
    return doc


def _flow_from_dict(doc: dict, tensors: dict[str, np.ndarray]) -> FlowPolicy:
    layers = []
    while f'layers.{len(layers)}.weight' in tensors:
        i = len(layers)
        if f'layers.{i}.bias' not in tensors:
            raise CheckpointError(f'Checkpoint misses tensor "layers.{i}.bias"')
        layers.append(Layer(tensors[f'layers.{i}.weight'], tensors[f'layers.{i}.bias']))
    if len(layers) * 2 != len(tensors):
        raise CheckpointError('Checkpoint contains tensors that are not network layers')
    return FlowPolicy(MlpParams(tuple(layers), doc.get('activation', 'tanh')),
                      int(doc['state_dim']), int(doc['action_dim']), int(doc.get('ode_steps', EVAL_ODE_STEPS)))


def _gaussian_from_dict(tensors: dict[str, np.ndarray]) -> GaussianPolicy:
    if set(tensors) != {'K', 'sigma'}:
        raise CheckpointError(f'Gaussian checkpoint must hold tensors K and sigma, found {sorted(tensors)}')
    return GaussianPolicy(tensors['K'], tensors['sigma'])


def policy_from_dict(doc: dict) -> FlowPolicy | GaussianPolicy:
    if not isinstance(doc, dict) or doc.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError('Not a flowsac checkpoint')
    version = doc.get('version')
    if not isinstance(version, int) or version > CHECKPOINT_VERSION:
        raise CheckpointError(f'Unsupported checkpoint version {version}')

    tensors = dict(decode_tensor(item) for item in doc.get('tensors', []))
    try:
        if doc.get('kind') == 'flow':
            policy = _flow_from_dict(doc, tensors)
        elif doc.get('kind') == 'gaussian':
            policy = _gaussian_from_dict(tensors)
        else:
            raise CheckpointError(f'Unknown checkpoint kind "{doc.get("kind")}"')
    except CheckpointError:
        raise
    except FlowSacError as e:
        raise CheckpointError(f'Checkpoint is inconsistent: {e}') from e
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f'Invalid checkpoint header: {e}') from e

    if (policy.state_dim, policy.action_dim) != (doc.get('state_dim'), doc.get('action_dim')):
        raise CheckpointError('Tensor shapes do not match the dimensions declared in the header')
    return policy


def save_policy(path: str, policy: FlowPolicy | GaussianPolicy, episode=0, alpha: float | None = None):
    if isinstance(policy, GaussianPolicy):
        doc = gaussian_to_dict(policy, alpha)
    else:
        doc = flow_to_dict(policy, episode, alpha)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, indent=2)
        f.write('\n')


def load_policy(path: str) -> FlowPolicy | GaussianPolicy:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f'Cannot read checkpoint {path}: {e}') from e
    return policy_from_dict(doc)
