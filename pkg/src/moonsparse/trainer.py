"""Sparse training loop: SGD with momentum, cosine learning rate, prune-and-grow,
the unknown-aware loss with its weight schedule, and end-of-training voting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, batches
from .moon import (
    PROB_FLOOR,
    MoonConfig,
    Voter,
    WState,
    beta_statistic,
    cross_entropy_grad,
    moon_loss,
    moon_loss_grad,
    voting_start_epoch,
    w_step,
)
from .network import SparseNetwork, backward, forward, predict, predict_from_probs
from .numeric import softmax
from .rng import SeededRng
from .sparsity import TopologySchedule, erk_init, prune_grow


class NumericalAbort(RuntimeError):
    def __init__(self, epoch, iteration, lr, w):
        super().__init__(
            f"non-finite loss at epoch {epoch}, iteration {iteration} (lr={lr!r}, w={w!r})"
        )
        self.epoch, self.iteration, self.lr, self.w = epoch, iteration, lr, w


class ComparisonError(ValueError):
    pass


LOSS_VARIANTS = ("moon", "cross-entropy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    hidden: tuple = (300, 100)
    batch_size: int = 128
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    sparsity: float = 0.9
    topology: TopologySchedule = field(default_factory=TopologySchedule)
    moon: MoonConfig | None = None
    loss: str = "cross-entropy"
    seed: int = 0
    vote: bool = True
    vote_start: float = 0.8
    log_wall_time: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.lr_max >= self.lr_min > 0.0:
            raise ValueError("need lr_max >= lr_min > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}")
        if self.loss == "moon" and self.moon is None:
            raise ValueError("the moon loss needs a MoonConfig")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    w: float
    sparsity: float
    wall_ms: float | None
    flops: float


@dataclass
class TrainResult:
    net: SparseNetwork
    raw_net: SparseNetwork
    logs: list
    w_state: WState | None
    topology_updates: int = 0


def lr_at(cfg: TrainConfig, t: float) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.epochs))


def sgd_step(net: SparseNetwork, grads, velocity, lr: float, momentum: float):
    """``v <- momentum * v + g``, ``theta <- theta - lr * v``, then re-mask the weights."""
    for layer, gw, gb, vel in zip(net.layers, grads.weights, grads.biases, velocity):
        vel[0] *= momentum
        vel[0] += gw
        vel[1] *= momentum
        vel[1] += gb
        layer.weight -= lr * vel[0]
        layer.bias -= lr * vel[1]
        layer.weight[~layer.mask] = 0.0
    net.touch()
    return net, velocity


def zero_velocity(net: SparseNetwork):
    return [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in net.layers]


def training_flops_per_sample(net: SparseNetwork, loss: str) -> float:
    """Forward + backward (3x forward) over active weights and biases, plus the loss head."""
    k1 = net.num_classes + 1
    body = 3.0 * sum(2.0 * l.nonzeros + l.bias.size for l in net.layers)
    head = 4.0 * k1
    if loss == "moon":
        head += 6.0 * k1 + 12.0
    return body + head


def build_network(cfg: TrainConfig, input_dim: int, num_classes: int, rng: SeededRng) -> SparseNetwork:
    dims = [input_dim, *cfg.hidden, num_classes + 1]
    masks = None
    if cfg.sparsity > 0.0:
        shapes = [(n_out, n_in) for n_in, n_out in zip(dims[:-1], dims[1:])]
        masks = erk_init(shapes, cfg.sparsity, rng)
    return SparseNetwork.initialize(dims, num_classes, rng, masks)


def accuracy_on(net: SparseNetwork, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(net, data.inputs) == data.labels))


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None = None,
          on_epoch=None, inspect=None) -> TrainResult:
    """Run the full schedule; deterministic given ``cfg.seed``.

    ``on_epoch(log)`` sees each epoch's log; ``inspect(epoch, net)`` sees the
    live network at each epoch end and must not modify it.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    k = train_set.num_classes
    if val_set is not None and val_set.num_classes != k:
        raise ValueError("train and validation label ranges differ")
    root = SeededRng(cfg.seed)
    init_rng, topo_rng, batch_rng = root.spawn(), root.spawn(), root.spawn()

    net = build_network(cfg, train_set.dim, k, init_rng)
    velocity = zero_velocity(net)
    moon_cfg = cfg.moon if cfg.loss == "moon" else None
    state = WState() if moon_cfg is not None else None
    voter = Voter(voting_start_epoch(cfg.epochs, cfg.vote_start))
    topo = cfg.topology
    freeze = topo.freeze_epoch(cfg.epochs)
    n = len(train_set)
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    x_all, y_all = train_set.inputs, train_set.labels
    flops_per_sample = None
    logs, step, n_updates = [], 0, 0

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        if state is not None and epoch >= moon_cfg.unknown_free_epochs:
            state = w_step(state, moon_cfg, epoch)
        w = state.w if state is not None else 0.0
        lr = lr_at(cfg, epoch)
        loss_sum, beta_sum = 0.0, 0.0
        flops_per_sample = training_flops_per_sample(net, cfg.loss)
        flops = 0.0

        for it, idx in enumerate(batches(n, cfg.batch_size, batch_rng)):
            x, y = x_all[idx], y_all[idx]
            logits, _, cache = forward(net, x)
            probs = softmax(logits)
            if cfg.loss == "moon":
                y_hat = predict_from_probs(probs, k)
                losses = moon_loss(probs, y, y_hat, w)
                dlogits = moon_loss_grad(probs, y, y_hat, w, moon_cfg.full_gradient)
            else:
                losses = -np.log(np.maximum(probs[np.arange(len(y)), y - 1], PROB_FLOOR))
                dlogits = cross_entropy_grad(probs, y)
            if not np.all(np.isfinite(losses)):
                raise NumericalAbort(epoch, it, lr, w)
            loss_sum += float(losses.sum())
            if state is not None and epoch < moon_cfg.unknown_free_epochs:
                beta_sum += beta_statistic(probs, losses) * len(y)
            grads, _ = backward(net, cache, dlogits / len(y))
            sgd_step(net, grads, velocity, lr, cfg.momentum)
            flops += flops_per_sample * len(y)
            step += 1

            progress = epoch + (it + 1) / iters_per_epoch
            if cfg.sparsity > 0.0 and step % topo.update_interval == 0 and progress < freeze:
                fraction = topo.fraction_at(progress, cfg.epochs)
                updates = prune_grow(net, topo.method, fraction, topo_rng, grads.weights)
                for vel, upd in zip(velocity, updates):
                    vel[0].reshape(-1)[upd.grown] = 0.0
                    vel[0].reshape(-1)[upd.pruned] = 0.0
                n_updates += 1

        if state is not None and epoch < moon_cfg.unknown_free_epochs:
            state = w_step(state, moon_cfg, epoch, beta=beta_sum / n)
        if cfg.vote and epoch >= voter.start_epoch:
            voter.accumulate(net)
            flops += 2.0 * sum(l.weight.size + l.bias.size for l in net.layers)
        log = EpochLog(
            epoch=epoch,
            train_loss=loss_sum / n,
            val_accuracy=accuracy_on(net, val_set) if val_set is not None else float("nan"),
            w=w,
            sparsity=net.sparsity(),
            wall_ms=(time.perf_counter() - tic) * 1e3 if cfg.log_wall_time else None,
            flops=flops,
        )
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if inspect is not None:
            inspect(epoch, net)

    final = voter.finalize() if cfg.vote and voter.count else net.copy()
    return TrainResult(final, net.copy(), logs, state, n_updates)


@dataclass
class OverheadReport:
    epochs: int
    flops_moon: float
    flops_baseline: float
    flops_ratio: float | None
    wall_ratio: float | None

    @property
    def undefined(self) -> bool:
        return self.flops_ratio is None


def flops_report(moon_cfg: TrainConfig, moon_logs, base_cfg: TrainConfig, base_logs) -> OverheadReport:
    """Compare a MOON run with a baseline run whose config differs only in the loss."""
    strip = dict(loss="cross-entropy", moon=None, log_wall_time=True)
    if replace(moon_cfg, **strip) != replace(base_cfg, **strip):
        raise ComparisonError("runs differ in more than the loss variant")
    if len(moon_logs) != len(base_logs):
        raise ComparisonError("runs have different epoch counts")
    if not moon_logs:
        return OverheadReport(0, 0.0, 0.0, None, None)
    f_moon = math.fsum(l.flops for l in moon_logs)
    f_base = math.fsum(l.flops for l in base_logs)
    wall = None
    if all(l.wall_ms is not None for l in moon_logs + base_logs):
        wall = math.fsum(l.wall_ms for l in moon_logs) / math.fsum(l.wall_ms for l in base_logs)
    return OverheadReport(len(moon_logs), f_moon, f_base, f_moon / f_base, wall)


def analytic_flops(net: SparseNetwork) -> float:
    """Forward+backward multiply-adds over active weights, per sample (3 x 2 x nnz)."""
    return 3.0 * sum(2.0 * l.nonzeros for l in net.layers)
