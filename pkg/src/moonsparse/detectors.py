"""Post-hoc OOD scores for a trained K+1 network. Higher means more in-distribution.

By default every detector reads only the first K entries of the head. The
unknown logit still enters through the softmax normalisation. Passing
``include_unknown=True`` scores over all K+1 entries instead, for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import SparseNetwork, backward, forward, predict_from_probs
from .numeric import as_f64, logsumexp, softmax

ODIN_TEMPERATURE = 1000.0
ODIN_EPSILON = 0.0014
KL_FLOOR = 1e-12


class DetectorStateError(RuntimeError):
    pass


def _dims(net: SparseNetwork, include_unknown: bool) -> int:
    return net.num_classes + 1 if include_unknown else net.num_classes


def msp_from_probs(probs, num_classes: int, include_unknown: bool = False):
    probs = as_f64(probs)
    d = num_classes + 1 if include_unknown else num_classes
    return np.max(probs[..., :d], axis=-1)


def score_msp(net: SparseNetwork, x, include_unknown: bool = False):
    logits, _, _ = forward(net, x)
    return msp_from_probs(softmax(logits), net.num_classes, include_unknown)


def score_ebo(net: SparseNetwork, x, temperature: float = 1.0, include_unknown: bool = False):
    """Negative free energy ``T * logsumexp(logits / T)`` over the scored logits."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    logits, _, _ = forward(net, x)
    d = _dims(net, include_unknown)
    return temperature * logsumexp(logits[..., :d] / temperature, axis=-1)


def score_odin(net: SparseNetwork, x, temperature: float = ODIN_TEMPERATURE,
               epsilon: float = ODIN_EPSILON, include_unknown: bool = False):
    """Temperature-scaled MSP after a signed-gradient step that raises it."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    x = as_f64(x)
    d = _dims(net, include_unknown)
    logits, _, cache = forward(net, x)
    if epsilon != 0.0:
        p = softmax(logits, temperature)
        top = np.argmax(p[..., :d], axis=-1)
        # d/dlogits of -log p_top at temperature T
        dlogits = p.copy()
        if dlogits.ndim == 1:
            dlogits[top] -= 1.0
        else:
            dlogits[np.arange(dlogits.shape[0]), top] -= 1.0
        _, input_grad = backward(net, cache, dlogits / temperature)
        x = x - epsilon * np.sign(input_grad)
        logits, _, _ = forward(net, x)
    return np.max(softmax(logits, temperature)[..., :d], axis=-1)


def l2_normalize(feats) -> np.ndarray:
    feats = np.atleast_2d(as_f64(feats))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.where(norms > 0.0, norms, 1.0)


@dataclass
class KnnBank:
    features: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def default_k(self) -> int:
        return max(1, int(np.floor(np.sqrt(self.size))))


def knn_fit(train_features) -> KnnBank:
    feats = np.atleast_2d(as_f64(train_features))
    if feats.shape[0] == 0:
        raise DetectorStateError("empty feature bank")
    return KnnBank(l2_normalize(feats))


def score_knn(bank: KnnBank, feats, k: int | None = None, chunk: int = 512):
    """Negative distance from each normalized query to its k-th nearest bank vector."""
    if bank is None or bank.size == 0:
        raise DetectorStateError("empty feature bank")
    k = bank.default_k() if k is None else int(k)
    if not 1 <= k <= bank.size:
        raise ValueError(f"k={k} outside [1, {bank.size}]")
    single = np.ndim(feats) == 1
    q = l2_normalize(feats)
    bank_sq = np.sum(bank.features ** 2, axis=1)
    out = np.empty(q.shape[0])
    for start in range(0, q.shape[0], chunk):
        block = q[start:start + chunk]
        d2 = np.sum(block ** 2, axis=1)[:, None] + bank_sq[None, :] - 2.0 * block @ bank.features.T
        # select with the expanded form, then measure the chosen neighbour directly
        idx = np.argpartition(d2, k - 1, axis=1)[:, k - 1]
        out[start:start + chunk] = -np.linalg.norm(block - bank.features[idx], axis=1)
    return float(out[0]) if single else out


@dataclass
class KlmTemplates:
    templates: np.ndarray  # (K, K+1)
    fallback: list = field(default_factory=list)


def klm_fit(val_probs, num_classes: int) -> KlmTemplates:
    """Mean K+1 softmax vector per predicted class; empty classes use the global mean."""
    probs = np.atleast_2d(as_f64(val_probs))
    if probs.shape[0] == 0:
        raise DetectorStateError("no validation probabilities")
    pred = predict_from_probs(probs, num_classes)
    global_mean = probs.mean(axis=0)
    templates, fallback = [], []
    for c in range(1, num_classes + 1):
        sel = pred == c
        if np.any(sel):
            templates.append(probs[sel].mean(axis=0))
        else:
            templates.append(global_mean)
            fallback.append(c)
    return KlmTemplates(np.vstack(templates), fallback)


def kl_divergence(p, q) -> np.ndarray:
    """KL(p || q) along the last axis; both sides floored at 1e-12 inside the log."""
    p, q = as_f64(p), as_f64(q)
    ratio = np.log(np.maximum(p, KL_FLOOR)) - np.log(np.maximum(q, KL_FLOOR))
    return np.sum(np.where(p > 0.0, p * ratio, 0.0), axis=-1)


def score_klm(templates: KlmTemplates, probs):
    probs = as_f64(probs)
    single = probs.ndim == 1
    p = np.atleast_2d(probs)
    kl = kl_divergence(p[:, None, :], templates.templates[None, :, :])
    out = -np.min(kl, axis=1)
    return float(out[0]) if single else out


@dataclass
class DetectorSpec:
    kind: str
    temperature: float = 1.0
    epsilon: float = 0.0
    k: int | None = None
    include_unknown: bool = False

    def __post_init__(self):
        if self.kind not in DETECTORS:
            raise ValueError(f"unknown detector {self.kind!r}; choose from {sorted(DETECTORS)}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.epsilon < 0.0:
            raise ValueError("perturbation size must be nonnegative")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")


DETECTORS = ("msp", "odin", "ebo", "knn", "klm")


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: dict


class Scorer:
    """Binds a network, its fitted banks/templates and detector settings."""

    def __init__(self, net: SparseNetwork, knn_bank: KnnBank | None = None,
                 klm_templates: KlmTemplates | None = None):
        self.net = net
        self.knn_bank = knn_bank
        self.klm_templates = klm_templates

    @classmethod
    def fit(cls, net: SparseNetwork, train_inputs, val_inputs) -> "Scorer":
        _, train_feats, _ = forward(net, train_inputs)
        val_logits, _, _ = forward(net, val_inputs)
        return cls(net, knn_fit(train_feats), klm_fit(softmax(val_logits), net.num_classes))

    def score(self, spec: DetectorSpec, x) -> np.ndarray:
        net = self.net
        if spec.kind == "msp":
            return score_msp(net, x, spec.include_unknown)
        if spec.kind == "ebo":
            return score_ebo(net, x, spec.temperature, spec.include_unknown)
        if spec.kind == "odin":
            return score_odin(net, x, spec.temperature, spec.epsilon, spec.include_unknown)
        if spec.kind == "knn":
            if self.knn_bank is None:
                raise DetectorStateError("KNN detector used before knn_fit")
            return score_knn(self.knn_bank, forward(net, x)[1], spec.k)
        if self.klm_templates is None:
            raise DetectorStateError("KLM detector used before klm_fit")
        logits, _, _ = forward(net, x)
        return score_klm(self.klm_templates, softmax(logits))
