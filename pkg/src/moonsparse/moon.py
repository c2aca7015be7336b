"""Unknown-aware loss, its weight scheduler, and the weight-averaging voter.

On a correctly predicted sample the loss is plain cross-entropy
``-log p_y``. On a mispredicted one it becomes
``-(1 + w / (1 + w * p_unk)) * log p_y``, where ``p_unk`` is the extra
(K+1)-th softmax entry. The model can then lower the loss by fixing the
prediction or by moving mass into the unknown slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .network import Layer, SparseNetwork

PROB_FLOOR = 1e-12


class LabelError(ValueError):
    pass


def _check_labels(y, num_classes):
    y = np.asarray(y)
    if np.any(y < 1) or np.any(y > num_classes):
        raise LabelError(f"labels must lie in 1..{num_classes}")
    return y.astype(np.int64)


def moon_loss(probs, y, y_hat, w: float):
    """Per-sample unknown-aware loss. Scalar inputs give a scalar."""
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    p = np.atleast_2d(probs)
    k = p.shape[1] - 1
    y = np.atleast_1d(_check_labels(y, k))
    y_hat = np.atleast_1d(_check_labels(y_hat, k))
    rows = np.arange(p.shape[0])
    nll = -np.log(np.maximum(p[rows, y - 1], PROB_FLOOR))
    factor = 1.0 + w / (1.0 + w * p[:, k])
    loss = np.where(y_hat == y, nll, factor * nll)
    return float(loss[0]) if single else loss


def moon_loss_grad(probs, y, y_hat, w: float, full_gradient: bool = True):
    """Gradient of :func:`moon_loss` with respect to the K+1 logits.

    The branch (correct vs. wrong) is held fixed. With ``full_gradient`` the
    weight factor is differentiated through ``p_unk``; otherwise it is
    treated as a constant.
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    p = np.atleast_2d(probs)
    k = p.shape[1] - 1
    y = np.atleast_1d(_check_labels(y, k))
    y_hat = np.atleast_1d(_check_labels(y_hat, k))
    rows = np.arange(p.shape[0])

    p_y = p[rows, y - 1]
    live = p_y >= PROB_FLOOR  # the clamp is flat below the floor
    ce_grad = p.copy()
    ce_grad[rows, y - 1] -= 1.0
    ce_grad[~live] = 0.0
    if w == 0.0:
        return ce_grad[0] if single else ce_grad

    wrong = y_hat != y
    q = p[:, k]
    factor = np.where(wrong, 1.0 + w / (1.0 + w * q), 1.0)
    grad = factor[:, None] * ce_grad
    if full_gradient:
        nll = -np.log(np.maximum(p_y, PROB_FLOOR))
        dfactor_dq = -(w * w) / (1.0 + w * q) ** 2
        dq_dz = -q[:, None] * p
        dq_dz[:, k] += q
        extra = (nll * dfactor_dq)[:, None] * dq_dz
        grad = grad + np.where(wrong[:, None], extra, 0.0)
    return grad[0] if single else grad


def cross_entropy_grad(probs, y):
    p = np.array(probs, dtype=np.float64, ndmin=2)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(p.shape[0])
    live = p[rows, y - 1] >= PROB_FLOOR
    p[rows, y - 1] -= 1.0
    p[~live] = 0.0
    return p


def beta_statistic(probs, losses) -> float:
    """Mean of ``(1 - p_unk) * loss`` over a set of samples."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return float(np.mean((1.0 - probs[:, -1]) * np.asarray(losses, dtype=np.float64)))


@dataclass(frozen=True)
class MoonConfig:
    total_epochs: int
    unknown_free_epochs: int = 5
    final_weight: float = 1.0
    init_factor: float = 64.0
    smoothing: float = 0.1
    full_gradient: bool = True

    def __post_init__(self):
        if not 0 < self.unknown_free_epochs < self.total_epochs:
            raise ValueError("need 0 < unknown_free_epochs < total_epochs")
        if self.init_factor <= 0.0:
            raise ValueError("init_factor must be positive")
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing must lie in (0, 1]")
        if self.final_weight < 0.0:
            raise ValueError("final_weight must be nonnegative")


@dataclass(frozen=True)
class WState:
    w: float = 0.0
    beta_avg: float = 0.0
    w_init: float | None = None
    delta: float = -1.0


def w_step(state: WState, cfg: MoonConfig, t: int, beta: float | None = None) -> WState:
    """Advance the loss-weight schedule for epoch ``t``.

    Before ``unknown_free_epochs`` the weight stays 0 and ``beta`` (this
    epoch's mean ``(1 - p_unk) * loss``) feeds an exponential moving
    average. The first later epoch fixes the initial weight
    ``min(beta_avg / init_factor, final_weight)`` and the per-epoch step;
    after that the weight follows the straight line from the initial weight
    toward ``final_weight`` at epoch ``total_epochs``.
    """
    if not 0 <= t < cfg.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.total_epochs})")
    if t < cfg.unknown_free_epochs:
        if beta is None:
            raise ValueError("warm-up epochs need the epoch's beta statistic")
        avg = (1.0 - cfg.smoothing) * state.beta_avg + cfg.smoothing * beta
        return replace(state, w=0.0, beta_avg=avg)
    if state.delta == -1.0:
        w_init = min(state.beta_avg / cfg.init_factor, cfg.final_weight)
        delta = (cfg.final_weight - w_init) / (cfg.total_epochs - cfg.unknown_free_epochs)
        return replace(state, w=w_init, w_init=w_init, delta=delta)
    return replace(state, w=state.w_init + (t - cfg.unknown_free_epochs) * state.delta)


def voting_start_epoch(total_epochs: int, start_fraction: float = 0.8) -> int:
    """First epoch that is averaged; pulled back so at least the last epoch votes."""
    return max(0, min(math.ceil(start_fraction * total_epochs), total_epochs - 1))


class VoterStateError(RuntimeError):
    pass


class Voter:
    """Uniform average of per-epoch parameters.

    Kept as a running mean so that averaging identical checkpoints returns
    them bit-for-bit.
    """

    def __init__(self, start_epoch: int = 0):
        self.start_epoch = start_epoch
        self.count = 0
        self._weights = None
        self._biases = None
        self._support = None
        self.num_classes = None

    def accumulate(self, net: SparseNetwork):
        self.count += 1
        if self._weights is None:
            self._weights = [l.weight.copy() for l in net.layers]
            self._biases = [l.bias.copy() for l in net.layers]
            self._support = [l.mask.copy() for l in net.layers]
            self.num_classes = net.num_classes
            return
        for i, layer in enumerate(net.layers):
            self._weights[i] += (layer.weight - self._weights[i]) / self.count
            self._biases[i] += (layer.bias - self._biases[i]) / self.count
            self._support[i] &= layer.mask

    def finalize(self) -> SparseNetwork:
        if self.count == 0:
            raise VoterStateError("no checkpoints were accumulated")
        layers = []
        for w, b, mask in zip(self._weights, self._biases, self._support):
            w = w.copy()
            w[~mask] = 0.0
            layers.append(Layer(w, b.copy(), mask.copy()))
        return SparseNetwork(layers, self.num_classes)
