'''Multilayer perceptron with exact derivatives

A fixed-architecture network of affine layers with a smooth activation after
every layer except the last. The module provides the forward pass, reverse-mode
gradients with respect to the parameters (and the input), forward-mode
directional derivatives with respect to the input, and an Adam optimizer.

Inputs are either a single row of shape (d,) or a batch of rows of shape
(n, d). Parameter gradients of a batch are summed over its rows.
'''
from __future__ import annotations
import math
import numpy as np
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence
from .errors import DimensionError, NonFiniteError


def _tanh_grad(out: np.ndarray) -> np.ndarray:
    return 1.0 - out * out


# Activation identifier -> (function, derivative expressed through the output)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    'tanh': (np.tanh, _tanh_grad),
}


class Layer(NamedTuple):
    weight: np.ndarray      # (out, in)
    bias: np.ndarray        # (out,)


def _map_layers(fn, *trees: Sequence[Layer]) -> tuple[Layer, ...]:
    return tuple(Layer(fn(*(l.weight for l in ls)), fn(*(l.bias for l in ls))) for ls in zip(*trees))


def _check_layers_finite(layers: Sequence[Layer], what: str):
    for i, layer in enumerate(layers):
        if not np.all(np.isfinite(layer.weight)):
            raise NonFiniteError(f'{what}: layer {i} weight contains non-finite entries')
        if not np.all(np.isfinite(layer.bias)):
            raise NonFiniteError(f'{what}: layer {i} bias contains non-finite entries')


@dataclass(frozen=True, eq=False)
class MlpParams:
    '''Parameters of a multilayer perceptron

    Layer i maps dimension layers[i].weight.shape[1] to
    layers[i].weight.shape[0]. All layers but the last are followed by the
    activation.
    '''
    layers: tuple[Layer, ...]
    activation: str = 'tanh'

    def __post_init__(self):
        if len(self.layers) == 0:
            raise DimensionError('Network needs at least one layer')
        if self.activation not in ACTIVATIONS:
            raise ValueError(f'Unknown activation "{self.activation}"')

        layers = tuple(Layer(np.asarray(l.weight, dtype=np.float64),
                             np.asarray(l.bias, dtype=np.float64)) for l in self.layers)
        for i, layer in enumerate(layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionError(f'Layer {i} has weight {layer.weight.shape} and bias {layer.bias.shape}')
            if i > 0 and layers[i - 1].weight.shape[0] != layer.weight.shape[1]:
                raise DimensionError(f'Layer {i - 1} output does not chain into layer {i} input')
        _check_layers_finite(layers, 'parameters')
        object.__setattr__(self, 'layers', layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [l.weight.shape[0] for l in self.layers]

    def same_shape(self, other: MlpParams | GradientBundle) -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.weight.shape == b.weight.shape and a.bias.shape == b.bias.shape
            for a, b in zip(self.layers, other.layers))

    def replace_layers(self, layers: Sequence[Layer]) -> MlpParams:
        return MlpParams(tuple(layers), self.activation)


@dataclass(frozen=True, eq=False)
class GradientBundle:
    '''Partial derivatives shaped like the layers of an MlpParams'''
    layers: tuple[Layer, ...]

    @classmethod
    def zeros_like(cls, params: MlpParams | GradientBundle) -> GradientBundle:
        return cls(_map_layers(np.zeros_like, params.layers))

    def __add__(self, other: GradientBundle) -> GradientBundle:
        return GradientBundle(_map_layers(np.add, self.layers, other.layers))

    def scale(self, factor: float) -> GradientBundle:
        return GradientBundle(_map_layers(lambda a: factor * a, self.layers))

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(l.weight ** 2) + np.sum(l.bias ** 2)) for l in self.layers))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation='tanh', final_scale=0.01) -> MlpParams:
    '''Initialize a network with layer widths sizes

    Weights and biases are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]. The
    final layer is scaled by final_scale so the initial output is close to
    zero.
    '''
    if len(sizes) < 2:
        raise DimensionError('A network needs an input and an output size')

    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if i == len(sizes) - 2:
            w *= final_scale
            b *= final_scale
        layers.append(Layer(w, b))
    return MlpParams(tuple(layers), activation)


def _as_rows(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f'Network expects input dimension {params.input_dim}, got shape {np.shape(inputs)}')
    return x, single


def _forward(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    act, _ = ACTIVATIONS[params.activation]
    outputs = [x]
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = h @ layer.weight.T + layer.bias
        if i < last:
            h = act(h)
        outputs.append(h)
    return outputs


def _backward(params: MlpParams, outputs: list[np.ndarray], cotangent: np.ndarray):
    _, grad = ACTIVATIONS[params.activation]
    g = cotangent
    last = len(params.layers) - 1
    layers = [None] * len(params.layers)
    for i in range(last, -1, -1):
        if i < last:
            g = g * grad(outputs[i + 1])
        layers[i] = Layer(g.T @ outputs[i], g.sum(axis=0))
        g = g @ params.layers[i].weight
    return GradientBundle(tuple(layers)), g


def _as_cotangent(params: MlpParams, x: np.ndarray, single: bool, cotangent: np.ndarray) -> np.ndarray:
    c = np.asarray(cotangent, dtype=np.float64)
    c = c.reshape(1, -1) if single and c.ndim == 1 else c
    if c.shape != (x.shape[0], params.output_dim):
        raise DimensionError(f'Cotangent shape {np.shape(cotangent)} does not match output of network')
    return c


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    x, single = _as_rows(params, inputs)
    out = _forward(params, x)[-1]
    return out[0] if single else out


def mlp_backward(params: MlpParams, inputs: np.ndarray, output_cotangent: np.ndarray) -> GradientBundle:
    '''Gradient of <output_cotangent, mlp_forward(params, inputs)> with respect to params

    For a batch of inputs the cotangent has one row per input and the result
    is summed over rows.
    '''
    x, single = _as_rows(params, inputs)
    c = _as_cotangent(params, x, single, output_cotangent)
    grads, _ = _backward(params, _forward(params, x), c)
    return grads


def mlp_value_and_backward(params: MlpParams, inputs: np.ndarray,
                           cotangent_fn: Callable[[np.ndarray], tuple[float, np.ndarray]]):
    '''Evaluate the network once and backpropagate a loss of its output

    cotangent_fn receives the (n, out) output and returns the loss value and
    the loss gradient with respect to the output.
    '''
    x, _ = _as_rows(params, inputs)
    outputs = _forward(params, x)
    loss, c = cotangent_fn(outputs[-1])
    grads, _ = _backward(params, outputs, c)
    return loss, grads


def mlp_input_vjp(params: MlpParams, inputs: np.ndarray, output_cotangent: np.ndarray) -> np.ndarray:
    x, single = _as_rows(params, inputs)
    c = _as_cotangent(params, x, single, output_cotangent)
    _, g = _backward(params, _forward(params, x), c)
    return g[0] if single else g


def mlp_input_jvp(params: MlpParams, inputs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    '''Directional derivative (d output / d input) . direction by forward accumulation

    direction is either one row shared by every input row or one row per
    input row.
    '''
    x, single = _as_rows(params, inputs)
    d = np.asarray(direction, dtype=np.float64)
    if d.shape[-1] != params.input_dim:
        raise DimensionError(f'Direction shape {d.shape} does not match network input dimension {params.input_dim}')
    t = np.broadcast_to(d, x.shape)

    act, grad = ACTIVATIONS[params.activation]
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = h @ layer.weight.T + layer.bias
        t = t @ layer.weight.T
        if i < last:
            h = act(h)
            t = grad(h) * t
    return t[0] if single else t


@dataclass(frozen=True, eq=False)
class AdamState:
    m: GradientBundle
    v: GradientBundle
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: MlpParams, learning_rate=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        zeros = GradientBundle.zeros_like(params)
        return cls(zeros, zeros, 0, learning_rate, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: GradientBundle, state: AdamState) -> tuple[MlpParams, AdamState]:
    '''One bias-corrected Adam update

    Returns new parameters and a new optimizer state; the inputs are not
    modified.
    '''
    if not params.same_shape(grads) or not params.same_shape(state.m):
        raise DimensionError('Gradient or optimizer state does not match parameter shapes')
    _check_layers_finite(grads.layers, 'gradient')

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = GradientBundle(_map_layers(lambda m, g: b1 * m + (1 - b1) * g, state.m.layers, grads.layers))
    v = GradientBundle(_map_layers(lambda v, g: b2 * v + (1 - b2) * g * g, state.v.layers, grads.layers))

    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    lr, eps = state.learning_rate, state.eps
    layers = _map_layers(lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + eps),
                         params.layers, m.layers, v.layers)

    return params.replace_layers(layers), AdamState(m, v, t, lr, b1, b2, eps)
