import numpy as np
import pytest
from flowsac.autodiff_net import init_mlp
from flowsac.config import preset_system
from flowsac.lqr import InitialState, LqrSystem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_sys():
    '''A = B = Q = R = 1, gamma = 0.9, unit noise, x0 = 1'''
    return LqrSystem(1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 1.0, InitialState(np.ones(1)))


@pytest.fixture
def quickstart_sys():
    return preset_system('quickstart_2d')


@pytest.fixture
def eq12_sys():
    return preset_system('paper_eq12')


@pytest.fixture
def small_net(rng):
    '''Factory for randomly initialized tanh networks with O(1) outputs'''
    def make(sizes, final_scale=1.0):
        return init_mlp(sizes, rng, final_scale=final_scale)
    return make


def flat_params(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in layers])


def central_difference(loss_of_params, params, h=1e-6) -> np.ndarray:
    '''Central finite differences of a scalar function of MlpParams, flattened like flat_params'''
    from flowsac.autodiff_net import Layer
    grads = []
    for i, layer in enumerate(params.layers):
        for part in ('weight', 'bias'):
            base = getattr(layer, part)
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                values = []
                for sign in (1, -1):
                    bumped = base.copy()
                    bumped[idx] += sign * h
                    layers = list(params.layers)
                    layers[i] = Layer(bumped, layer.bias) if part == 'weight' else Layer(layer.weight, bumped)
                    values.append(loss_of_params(params.replace_layers(layers)))
                g[idx] = (values[0] - values[1]) / (2 * h)
            grads.append(g.ravel())
    return np.concatenate(grads)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
