"""Minimal layered feed-forward network with explicit forward/backward passes.

Everything is float64 and purely functional: layers are value objects, the
optimizer returns new layers, and no function keeps hidden state. A model
can be split at any layer index into a front (client-side) and back
(server-side) stack; gradients flowing through the composed halves are the
same as through the unsplit stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


@dataclass
class Dense:
    """Fully connected layer: y = x @ weights + bias.

    weights has shape (in_units, out_units); rows of the batch are samples.
    """

    weights: Array
    bias: Array

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("dense weights must be 2-D")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[1]} output units"
            )

    @property
    def in_units(self) -> int:
        return self.weights.shape[0]

    @property
    def out_units(self) -> int:
        return self.weights.shape[1]


@dataclass
class Relu:
    """Elementwise max(0, x); has no parameters."""


Layer = Dense | Relu


@dataclass
class DenseGrad:
    """Gradient holder mirroring a Dense layer's parameter shapes."""

    weights: Array
    bias: Array


@dataclass
class ForwardCache:
    """Per-layer inputs (plus the final output) retained for backprop."""

    inputs: list[Array]
    output: Array

    def __post_init__(self) -> None:
        if not isinstance(self.inputs, list):
            self.inputs = list(self.inputs)


@dataclass
class LayeredModel:
    """Ordered layer stack with a split point.

    cut_index separates the client-side part layers[:cut_index] from the
    server-side part layers[cut_index:]; it must satisfy 1 <= cut < N.
    """

    layers: list[Layer]
    cut_index: int

    def __post_init__(self) -> None:
        n = len(self.layers)
        if not 1 <= self.cut_index < n:
            raise ValueError(
                f"cut_index {self.cut_index} out of range for {n} layers"
            )
        validate_stack(self.layers)


def validate_stack(layers: Sequence[Layer]) -> None:
    """Check that dense layer widths chain consistently."""
    width = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if width is not None and layer.in_units != width:
                raise ValueError(
                    f"layer {i}: expected {width} input units, "
                    f"got {layer.in_units}"
                )
            width = layer.out_units


def stack_input_width(layers: Sequence[Layer]) -> int | None:
    for layer in layers:
        if isinstance(layer, Dense):
            return layer.in_units
    return None


def stack_output_width(layers: Sequence[Layer]) -> int | None:
    for layer in reversed(layers):
        if isinstance(layer, Dense):
            return layer.out_units
    return None


def init_mlp(widths: Sequence[int], cut_index: int, rng: np.random.Generator) -> LayeredModel:
    """Build Dense/Relu stacks for the given widths.

    widths = [input_dim, hidden..., num_classes]. Every consecutive pair
    becomes a Dense layer; a Relu follows each Dense except the last.
    Weights are drawn uniformly from +-sqrt(6 / (fan_in + fan_out)) and
    biases start at zero.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    layers: list[Layer] = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Dense(weights=weights, bias=np.zeros(fan_out)))
        if i < len(widths) - 2:
            layers.append(Relu())
    return LayeredModel(layers=layers, cut_index=cut_index)


def copy_layers(layers: Sequence[Layer]) -> list[Layer]:
    out: list[Layer] = []
    for layer in layers:
        if isinstance(layer, Dense):
            out.append(Dense(weights=layer.weights.copy(), bias=layer.bias.copy()))
        else:
            out.append(Relu())
    return out


def count_parameters(layers: Sequence[Layer]) -> int:
    total = 0
    for layer in layers:
        if isinstance(layer, Dense):
            total += layer.weights.size + layer.bias.size
    return total


def parameter_vector(layers: Sequence[Layer]) -> Array:
    """Flatten all parameters into one vector (fixed layer-major order)."""
    parts = []
    for layer in layers:
        if isinstance(layer, Dense):
            parts.append(layer.weights.ravel())
            parts.append(layer.bias.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def grad_vector(grads: Sequence[DenseGrad | None]) -> Array:
    parts = []
    for g in grads:
        if g is not None:
            parts.append(g.weights.ravel())
            parts.append(g.bias.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def forward(layers: Sequence[Layer], x: Array) -> tuple[Array, ForwardCache]:
    """Run the stack on a batch (rows = samples); returns output and cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("input must be a 2-D batch")
    expected = stack_input_width(layers)
    if expected is not None and x.shape[1] != expected:
        raise ValueError(
            f"input has {x.shape[1]} columns, first dense layer expects {expected}"
        )
    inputs = []
    for layer in layers:
        inputs.append(x)
        if isinstance(layer, Dense):
            x = x @ layer.weights + layer.bias
        else:
            x = np.maximum(x, 0.0)
    return x, ForwardCache(inputs=inputs, output=x)


def backward(
    layers: Sequence[Layer], cache: ForwardCache, upstream: Array
) -> tuple[list[DenseGrad | None], Array]:
    """Chain-rule pass: returns per-layer parameter grads and the input grad.

    upstream is d(loss)/d(output) with the same shape as the stack output.
    """
    if len(cache.inputs) != len(layers):
        raise ValueError("cache does not match the layer stack")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.output.shape:
        raise ValueError(
            f"upstream grad shape {upstream.shape} != output shape {cache.output.shape}"
        )
    grads: list[DenseGrad | None] = [None] * len(layers)
    g = upstream
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x = cache.inputs[i]
        if isinstance(layer, Dense):
            grads[i] = DenseGrad(weights=x.T @ g, bias=g.sum(axis=0))
            g = g @ layer.weights.T
        else:
            g = g * (x > 0.0)
    return grads, g


def sgd_step(
    layers: Sequence[Layer], grads: Sequence[DenseGrad | None], eta: float
) -> list[Layer]:
    """One plain gradient-descent step: params - eta * grads (new layers)."""
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    if len(grads) != len(layers):
        raise ValueError("grads do not match the layer stack")
    out: list[Layer] = []
    for layer, g in zip(layers, grads):
        if isinstance(layer, Dense):
            if g is None:
                raise ValueError("missing gradient for dense layer")
            if g.weights.shape != layer.weights.shape or g.bias.shape != layer.bias.shape:
                raise ValueError("gradient shape mismatch")
            out.append(
                Dense(
                    weights=layer.weights - eta * g.weights,
                    bias=layer.bias - eta * g.bias,
                )
            )
        else:
            out.append(Relu())
    return out


def split_model(model: LayeredModel) -> tuple[list[Layer], list[Layer]]:
    """Return (client_part, server_part) = layers[:cut], layers[cut:]."""
    return (
        copy_layers(model.layers[: model.cut_index]),
        copy_layers(model.layers[model.cut_index :]),
    )


def join_models(client_part: Sequence[Layer], server_part: Sequence[Layer]) -> LayeredModel:
    """Inverse of split_model; cut_index is the client part's length."""
    layers = copy_layers(client_part) + copy_layers(server_part)
    return LayeredModel(layers=layers, cut_index=len(client_part))


LossFn = Callable[[Sequence[Layer], tuple], float]


def finite_difference_grad(
    layers: Sequence[Layer],
    batch: tuple,
    loss_fn: LossFn,
    eps: float = 1e-5,
) -> list[DenseGrad | None]:
    """Central-difference estimate of d loss_fn / d params.

    Independent of backward(): evaluates loss_fn under +-eps perturbations
    of every scalar parameter in turn.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = copy_layers(layers)
    grads: list[DenseGrad | None] = []
    for li, layer in enumerate(work):
        if not isinstance(layer, Dense):
            grads.append(None)
            continue
        dw = np.zeros_like(layer.weights)
        db = np.zeros_like(layer.bias)
        for arr, out in ((layer.weights, dw), (layer.bias, db)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + eps
                plus = loss_fn(work, batch)
                arr[idx] = orig - eps
                minus = loss_fn(work, batch)
                arr[idx] = orig
                out[idx] = (plus - minus) / (2.0 * eps)
        grads.append(DenseGrad(weights=dw, bias=db))
    return grads
