"""Masked multilayer perceptron with a K+1 output head.

Weights are stored dense as ``(n_out, n_in)`` matrices next to boolean masks;
masked entries are held at exactly zero. Hidden layers use ReLU, the output
layer is linear, and the extra last logit carries the "unknown" slot.
Class labels exposed to callers are 1-based (``1..K``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import DimensionError, as_f64, relu_backward, relu_forward, softmax
from .rng import SeededRng


class StaleCacheError(RuntimeError):
    """A forward cache was used after the network's parameters changed."""


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list
    activations: list
    version: int
    batched: bool


@dataclass
class Gradients:
    """Dense parameter gradients. ``inactive[i]`` flags masked-out weight slots."""

    weights: list
    biases: list
    inactive: list = field(default_factory=list)


class SparseNetwork:
    def __init__(self, layers: list[Layer], num_classes: int):
        self.layers = layers
        self.num_classes = int(num_classes)
        self.version = 0
        self._validate()

    def _validate(self):
        if not self.layers:
            raise DimensionError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise DimensionError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        if self.layers[-1].weight.shape[0] != self.num_classes + 1:
            raise DimensionError(
                f"output layer has {self.layers[-1].weight.shape[0]} units, expected K+1={self.num_classes + 1}"
            )
        for layer in self.layers:
            if layer.mask.shape != layer.weight.shape or layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionError("mask/bias shapes disagree with weight")

    @classmethod
    def initialize(cls, layer_dims, num_classes: int, rng: SeededRng, masks=None) -> "SparseNetwork":
        """He-normal weights, zero biases. ``layer_dims`` runs input -> ... -> K+1."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            w = rng.standard_normal(n_in * n_out).reshape(n_out, n_in) * np.sqrt(2.0 / n_in)
            mask = np.ones((n_out, n_in), dtype=bool) if masks is None else np.asarray(masks[i], dtype=bool)
            layers.append(Layer(np.where(mask, w, 0.0), np.zeros(n_out), mask.copy()))
        return cls(layers, num_classes)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def copy(self) -> "SparseNetwork":
        return SparseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.mask.copy()) for l in self.layers],
            self.num_classes,
        )

    def touch(self):
        """Record a parameter mutation so outstanding caches go stale."""
        self.version += 1

    def apply_masks(self):
        for layer in self.layers:
            layer.weight[~layer.mask] = 0.0

    def check_masks(self) -> bool:
        return all(not np.any(l.weight[~l.mask]) for l in self.layers)

    def nonzero_weights(self) -> int:
        return sum(l.nonzeros for l in self.layers)

    def total_weights(self) -> int:
        return sum(l.weight.size for l in self.layers)

    def sparsity(self) -> float:
        return 1.0 - self.nonzero_weights() / self.total_weights()


def forward(net: SparseNetwork, x):
    """Return ``(logits, features, cache)``; features are the penultimate activations."""
    x = as_f64(x)
    batched = x.ndim == 2
    a = x if batched else x[None, :]
    if a.shape[1] != net.input_dim:
        raise DimensionError(f"input has {a.shape[1]} features, network expects {net.input_dim}")
    pre, acts = [], [a]
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = z if i == last else relu_forward(z)
        acts.append(a)
    logits, features = acts[-1], acts[-2]
    cache = ForwardCache(acts[0], pre, acts, net.version, batched)
    if not batched:
        logits, features = logits[0], features[0]
    return logits, features, cache


def backward(net: SparseNetwork, cache: ForwardCache, dlogits):
    """Reverse-mode gradients of ``sum(logits * dlogits)``.

    Returns ``(Gradients, input_grad)``. Weight gradients are dense, including
    masked slots.
    """
    if cache.version != net.version:
        raise StaleCacheError("forward cache predates the latest parameter update")
    dz = as_f64(dlogits)
    if not cache.batched:
        dz = dz[None, :]
    if dz.shape != cache.activations[-1].shape:
        raise DimensionError(f"dlogits shape {dz.shape} vs logits {cache.activations[-1].shape}")
    n = len(net.layers)
    w_grads, b_grads = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        layer = net.layers[i]
        w_grads[i] = dz.T @ cache.activations[i]
        b_grads[i] = dz.sum(axis=0)
        da = dz @ layer.weight
        if i > 0:
            dz = relu_backward(cache.pre_activations[i - 1], da)
    input_grad = da if cache.batched else da[0]
    grads = Gradients(w_grads, b_grads, [~l.mask for l in net.layers])
    return grads, input_grad


def predict_proba(net: SparseNetwork, x) -> np.ndarray:
    logits, _, _ = forward(net, x)
    return softmax(logits)


def predict_from_probs(probs, num_classes: int) -> np.ndarray:
    """1-based argmax over the first K entries; ties go to the lowest index."""
    probs = as_f64(probs)
    return np.argmax(probs[..., :num_classes], axis=-1) + 1


def predict(net: SparseNetwork, x):
    out = predict_from_probs(predict_proba(net, x), net.num_classes)
    return int(out) if np.ndim(out) == 0 else out


def features(net: SparseNetwork, x) -> np.ndarray:
    return forward(net, x)[1]
