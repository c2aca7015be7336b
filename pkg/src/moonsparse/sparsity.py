"""Sparse mask lifecycle: ERK allocation and SET/RigL prune-and-grow.

Only weight matrices are sparsified; biases stay dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import SparseNetwork
from .rng import SeededRng


class SparsityConfigError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def erk_densities(shapes, sparsity: float) -> list[float]:
    """Per-layer densities from the Erdos-Renyi rule for dense layers.

    ``shapes`` are ``(n_out, n_in)`` pairs. Raw scores are
    ``(n_in + n_out) / (n_in * n_out)``; a common scale brings the total to
    ``(1 - sparsity)`` of all weights, and layers pushed past density 1 are
    clamped dense with the scale re-solved on the rest.
    """
    if not 0.0 < sparsity < 1.0:
        raise SparsityConfigError(f"sparsity must lie in (0, 1), got {sparsity}")
    params = [n_out * n_in for n_out, n_in in shapes]
    scores = [(n_in + n_out) / (n_in * n_out) for n_out, n_in in shapes]
    target = (1.0 - sparsity) * sum(params)
    dense: set[int] = set()
    while True:
        budget = target - sum(params[i] for i in dense)
        denom = sum(scores[i] * params[i] for i in range(len(shapes)) if i not in dense)
        if denom == 0.0:
            break
        eps = budget / denom
        over = {i for i in range(len(shapes)) if i not in dense and eps * scores[i] > 1.0}
        if not over:
            break
        dense |= over
    return [1.0 if i in dense else eps * scores[i] for i in range(len(shapes))]


def erk_counts(shapes, sparsity: float) -> list[int]:
    """Nonzero counts per layer summing to ``round((1 - s) * total)`` exactly.

    Fractional allocations are settled by largest remainder (ties to the
    earlier layer).
    """
    densities = erk_densities(shapes, sparsity)
    params = [n_out * n_in for n_out, n_in in shapes]
    total = _round_half_up((1.0 - sparsity) * sum(params))
    raw = [d * p for d, p in zip(densities, params)]
    counts = [min(int(math.floor(r)), p) for r, p in zip(raw, params)]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - math.floor(raw[i])), i))
    deficit = total - sum(counts)
    while deficit > 0:
        progressed = False
        for i in order:
            if deficit == 0:
                break
            if counts[i] < params[i]:
                counts[i] += 1
                deficit -= 1
                progressed = True
        if not progressed:
            break
    if any(c == 0 for c in counts):
        raise SparsityConfigError(
            f"sparsity {sparsity} leaves a layer with no connections (counts {counts})"
        )
    return counts


def erk_init(shapes, sparsity: float, rng: SeededRng) -> list[np.ndarray]:
    """Boolean masks with ERK counts and uniformly random positions per layer."""
    masks = []
    for (n_out, n_in), count in zip(shapes, erk_counts(shapes, sparsity)):
        flat = np.zeros(n_out * n_in, dtype=bool)
        flat[rng.sample_without_replacement(np.arange(n_out * n_in), count)] = True
        masks.append(flat.reshape(n_out, n_in))
    return masks


@dataclass
class TopologySchedule:
    sparsity: float = 0.9
    method: str = "rigl"
    initial_fraction: float = 0.3
    freeze_point: float = 0.7
    update_interval: int = 100

    def __post_init__(self):
        if self.method not in ("rigl", "set"):
            raise SparsityConfigError(f"unknown topology method {self.method!r}")
        if not 0.0 < self.initial_fraction <= 1.0:
            raise SparsityConfigError("initial_fraction must lie in (0, 1]")
        if self.update_interval < 1:
            raise SparsityConfigError("update_interval must be a positive iteration count")

    def freeze_epoch(self, total_epochs: float) -> float:
        return self.freeze_point * total_epochs

    def fraction_at(self, t: float, total_epochs: float) -> float:
        """Cosine-decayed prune fraction; zero from the freeze point on."""
        end = self.freeze_epoch(total_epochs)
        if t >= end:
            return 0.0
        return 0.5 * self.initial_fraction * (1.0 + math.cos(math.pi * t / end))


@dataclass
class LayerUpdate:
    pruned: np.ndarray
    grown: np.ndarray
    shortfall: int = 0


def prune_grow(net: SparseNetwork, method: str, fraction: float, rng: SeededRng | None = None,
               dense_grads=None) -> list[LayerUpdate]:
    """One topology update, in place.

    Per layer, ``round(fraction * nonzeros)`` active weights with the smallest
    magnitude are dropped, then the same number of slots is grown among the
    now-inactive ones: at random (SET) or by largest dense-gradient magnitude
    (RigL). Grown weights start at 0. Sorts are stable by flat index.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if method == "rigl" and dense_grads is None:
        raise ValueError("RigL growth needs dense gradients")
    if method == "set" and rng is None:
        raise ValueError("SET growth needs an rng")
    empty = np.empty(0, dtype=np.int64)
    updates = []
    for li, layer in enumerate(net.layers):
        w = layer.weight.reshape(-1)
        m = layer.mask.reshape(-1)
        active = np.flatnonzero(m)
        k = _round_half_up(fraction * active.size)
        if k == 0:
            updates.append(LayerUpdate(empty, empty))
            continue
        order = np.argsort(np.abs(w[active]), kind="stable")
        pruned = active[order[:k]]
        m[pruned] = False
        w[pruned] = 0.0

        candidates = np.flatnonzero(~m)
        n_grow = min(k, candidates.size)
        if method == "rigl":
            g = np.abs(np.asarray(dense_grads[li], dtype=np.float64).reshape(-1)[candidates])
            grown = candidates[np.argsort(-g, kind="stable")[:n_grow]]
        else:
            grown = rng.sample_without_replacement(candidates, n_grow)
        m[grown] = True
        w[grown] = 0.0
        updates.append(LayerUpdate(pruned, np.sort(grown), k - n_grow))
    net.touch()
    return updates
