"""Feed-forward ReLU networks: exact evaluation, input gradients and splitting.

Class indices are 0-based everywhere in the package; a network with outputs
``(y_0, ..., y_{n-1})`` classifies as the lowest index attaining the maximum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when an input or a layer has incompatible dimensions."""


def _frozen(values, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Affine:
    """``x -> weights @ x + bias`` with ``weights`` of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights, 2, "affine weights")
        b = _frozen(self.bias, 1, "affine bias")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(f"weights have {w.shape[0]} rows but bias has length {b.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias


@dataclass(frozen=True)
class Relu:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError("relu dimension must be positive")

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)


Layer = Union[Affine, Relu]


class Dnn:
    """An immutable sequence of affine and ReLU layers.

    ``final_affine=False`` is only used for network prefixes produced by
    :func:`split`, whose output is a feature vector rather than class scores.
    """

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[Layer], *, final_affine: bool = True):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for k, layer in enumerate(layers):
            if not isinstance(layer, (Affine, Relu)):
                raise TypeError(f"layer {k} is {type(layer).__name__}, expected Affine or Relu")
        for k in range(1, len(layers)):
            if layers[k - 1].out_dim != layers[k].in_dim:
                raise ShapeError(
                    f"layer {k - 1} outputs {layers[k - 1].out_dim} values "
                    f"but layer {k} expects {layers[k].in_dim}"
                )
        if final_affine and not isinstance(layers[-1], Affine):
            raise ShapeError("the final layer of a classifier must be affine")
        object.__setattr__(self, "layers", layers)

    def __setattr__(self, name, value):
        raise AttributeError("Dnn is immutable")

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence) -> "Dnn":
        """Alternate affine and ReLU layers; no ReLU after the last affine."""
        if len(weights) != len(biases):
            raise ShapeError("need one bias per weight matrix")
        layers: list[Layer] = []
        for k, (w, b) in enumerate(zip(weights, biases)):
            aff = Affine(w, b)
            layers.append(aff)
            if k < len(weights) - 1:
                layers.append(Relu(aff.out_dim))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def affine_layers(self) -> list[Affine]:
        return [layer for layer in self.layers if isinstance(layer, Affine)]

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(a.weights, a.bias) for a in self.affine_layers]

    def with_parameters(self, params: Sequence[tuple[np.ndarray, np.ndarray]]) -> "Dnn":
        """Same architecture, new affine parameters (in layer order)."""
        params = list(params)
        if len(params) != len(self.affine_layers):
            raise ShapeError("parameter count does not match the architecture")
        it = iter(params)
        layers = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                w, b = next(it)
                new = Affine(w, b)
                if new.weights.shape != layer.weights.shape:
                    raise ShapeError("parameter shapes do not match the architecture")
                layers.append(new)
            else:
                layers.append(layer)
        return Dnn(layers, final_affine=isinstance(self.layers[-1], Affine))

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input of length {self.input_dim}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        return forward(self, x)

    __call__ = forward

    def classify(self, x):
        return classify(self, x)

    def input_gradient(self, x, objective) -> np.ndarray:
        return input_gradient(self, x, objective)

    def __repr__(self) -> str:
        dims = [self.input_dim] + [a.out_dim for a in self.affine_layers]
        return f"Dnn({'-'.join(map(str, dims))})"


@dataclass(frozen=True)
class SplitNetwork:
    prefix: Dnn
    suffix: Dnn
    split_layer: int

    def feature(self, x) -> np.ndarray:
        return forward(self.prefix, x)


def forward(net: Dnn, x) -> np.ndarray:
    """Evaluate ``net`` on a single input or a batch (last axis = features)."""
    h = net._check_input(x)
    for layer in net.layers:
        h = layer(h)
    return h


def classify(net: Dnn, x):
    """Index of the maximal output; ties go to the lowest index."""
    y = forward(net, x)
    out = np.argmax(y, axis=-1)
    return int(out) if out.ndim == 0 else out


def input_gradient(net: Dnn, x, objective) -> np.ndarray:
    """Gradient of ``objective . net(x)`` with respect to ``x``.

    ``objective`` is a coefficient vector over outputs (or one per batch
    row). A ReLU whose pre-activation is exactly zero passes no gradient.
    """
    h = net._check_input(x)
    c = np.asarray(objective, dtype=np.float64)
    if c.shape[-1] != net.output_dim:
        raise ShapeError(f"objective must have length {net.output_dim}, got shape {c.shape}")
    inputs = []
    for layer in net.layers:
        inputs.append(h)
        h = layer(h)
    g = np.broadcast_to(c, h.shape).copy()
    for layer, h_in in zip(reversed(net.layers), reversed(inputs)):
        if isinstance(layer, Affine):
            g = g @ layer.weights
        else:
            g = g * (h_in > 0)
    return g


def default_split_layer(net: Dnn) -> int:
    """Boundary right before the second-to-last affine layer."""
    positions = [k for k, layer in enumerate(net.layers) if isinstance(layer, Affine)]
    if len(positions) < 2 or positions[-2] < 1:
        raise ValueError(f"{net!r} has no hidden-layer feature space before its second-to-last affine layer")
    return positions[-2]


def split(net: Dnn, l: int | None = None) -> SplitNetwork:
    """Split into ``prefix = layers[:l]`` and ``suffix = layers[l:]``."""
    if l is None:
        l = default_split_layer(net)
    if not 1 <= l < len(net.layers):
        raise IndexError(f"split layer must be in [1, {len(net.layers) - 1}], got {l}")
    prefix = Dnn(net.layers[:l], final_affine=False)
    suffix = Dnn(net.layers[l:])
    return SplitNetwork(prefix, suffix, l)
