"""Small dense feed-forward engine with hand-written backprop.

Everything is float64 and numpy only. Inputs may be a single vector or a
batch of row vectors; batches are what training uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not fit the layer it is fed to."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class CacheError(RuntimeError):
    """Raised when backward is handed a cache from another network or a stale one."""


class NonFiniteGradientError(FloatingPointError):
    pass


class Activation(str, Enum):
    ELU = "elu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"


def _apply(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.ELU:
        # expm1 only on the negative side to avoid overflow warnings
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if act is Activation.SIGMOID:
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _derivative(act: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if act is Activation.ELU:
        return np.where(z > 0, 1.0, a + 1.0)
    if act is Activation.SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation = Activation.LINEAR
    l2_coefficient: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be nonnegative")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Network:
    layers: list[DenseLayer]
    # bumped by the optimizer so that old caches can be detected
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i - 1].out_dim != self.layers[i].in_dim:
                raise ShapeError(
                    f"in_dim {self.layers[i].in_dim} does not match previous "
                    f"out_dim {self.layers[i - 1].out_dim}",
                    layer=i,
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in (W0, b0, W1, b1, ...) order. Live views."""
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params

    def l2_penalty(self) -> float:
        return float(sum(l.l2_coefficient * np.sum(l.weights**2) for l in self.layers))

    def copy(self) -> "Network":
        return Network(
            [
                DenseLayer(l.weights.copy(), l.bias.copy(), l.activation, l.l2_coefficient)
                for l in self.layers
            ]
        )


@dataclass
class ForwardCache:
    network_id: int
    version: int
    squeeze: bool
    inputs: list[np.ndarray]  # input to every layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def flat(self) -> list[np.ndarray]:
        """Same ordering as Network.parameters()."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def forward(net: Network, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise ShapeError(f"expected input width {net.in_dim}, got shape {x.shape}", layer=0)
    inputs, pre, post = [], [], []
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        a = _apply(layer.activation, z)
        pre.append(z)
        post.append(a)
    cache = ForwardCache(id(net), net.version, squeeze, inputs, pre, post)
    return (a[0] if squeeze else a), cache


def backward(net: Network, cache: ForwardCache, output_gradient) -> Gradients:
    """Backpropagate ``output_gradient`` (dLoss/dOutput) through ``net``.

    The L2 term ``l2 * sum(W**2)`` of every layer is part of the loss, so
    each weight gradient carries an extra ``2 * l2 * W``.
    """
    if cache.network_id != id(net) or cache.version != net.version:
        raise CacheError("cache was produced by a different or since-updated network")
    if len(cache.pre) != len(net.layers):
        raise CacheError("cache depth does not match network depth")
    delta = np.asarray(output_gradient, dtype=np.float64)
    if cache.squeeze:
        delta = delta[None, :]
    if delta.shape != cache.post[-1].shape:
        raise ShapeError(
            f"output gradient shape {delta.shape} != output shape {cache.post[-1].shape}",
            layer=len(net.layers) - 1,
        )
    dws: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = delta * _derivative(layer.activation, cache.pre[i], cache.post[i])
        dws[i] = dz.T @ cache.inputs[i] + 2.0 * layer.l2_coefficient * layer.weights
        dbs[i] = dz.sum(axis=0)
        delta = dz @ layer.weights
    return Gradients(dws, dbs, delta[0] if cache.squeeze else delta)


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    learning_rate: float
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float, momentum: float = 0.9):
        return cls([np.zeros_like(p) for p in params], learning_rate, momentum)


def sgd_momentum_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState
) -> Sequence[np.ndarray]:
    """Heavy-ball update, in place: ``v = m*v - lr*g; p = p + v``."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("params, grads and velocity differ in length")
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {i}: shapes {p.shape}, {g.shape}, {v.shape} disagree")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter {i} (shape {g.shape}); "
                f"learning_rate={state.learning_rate}"
            )
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v -= state.learning_rate * g
        p += v
    return params


def init_network(
    spec: Sequence[tuple[int, int, Activation | str, float]],
    seed: int | np.random.Generator | None = 0,
) -> Network:
    """Build a network from ``(in_dim, out_dim, activation, l2)`` tuples.

    Weights are Glorot-uniform on ``+-sqrt(6 / (in_dim + out_dim))``, biases zero.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out, act, l2) in enumerate(spec):
        if n_in <= 0 or n_out <= 0:
            raise ShapeError(f"dimensions must be positive, got ({n_in}, {n_out})", layer=i)
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        layers.append(DenseLayer(w, np.zeros(n_out), Activation(act), float(l2)))
    return Network(layers)
