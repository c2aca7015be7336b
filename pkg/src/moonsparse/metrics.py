"""OOD and calibration metrics.

In-distribution samples are the positive class and higher scores mean
"more in-distribution".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class MetricInputError(ValueError):
    pass


def _scores(id_scores, ood_scores):
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        raise MetricInputError("ID and OOD score sets must both be nonempty")
    return id_scores, ood_scores


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC; ties count one half."""
    id_scores, ood_scores = _scores(id_scores, ood_scores)
    n, m = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores at or above the largest threshold keeping TPR >= target.

    No interpolation between operating points.
    """
    id_scores, ood_scores = _scores(id_scores, ood_scores)
    n = id_scores.size
    need = max(1, math.ceil(tpr_target * n))
    while need > 1 and (need - 1) / n >= tpr_target:
        need -= 1
    while need < n and need / n < tpr_target:
        need += 1
    tau = np.sort(id_scores)[::-1][need - 1]
    return float(np.count_nonzero(ood_scores >= tau) / ood_scores.size)


def aupr(id_scores, ood_scores) -> float:
    """Average precision with ID as positive: sum of recall steps times precision.

    Tied scores enter as one operating point.
    """
    id_scores, ood_scores = _scores(id_scores, ood_scores)
    scores = np.concatenate([id_scores, ood_scores])
    is_pos = np.concatenate([np.ones(id_scores.size, bool), np.zeros(ood_scores.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(~is_pos)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    tp, fp = tp[ends], fp[ends]
    prev_tp = np.concatenate([[0], tp[:-1]])
    terms = [(int(a) - int(b)) / id_scores.size * (int(a) / (int(a) + int(c)))
             for a, b, c in zip(tp, prev_tp, fp)]
    return math.fsum(terms)


@dataclass
class CalibrationBins:
    num_bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    mean_accuracy: np.ndarray


def bin_edges(num_bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, num_bins + 1)


def calibration_bins(confidences, correct, num_bins: int = 15) -> CalibrationBins:
    """Equal-width, right-closed bins; a confidence of exactly 0 joins the first bin."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hits = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise MetricInputError("no samples")
    if conf.size != hits.size:
        raise MetricInputError("confidence and correctness lengths differ")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise MetricInputError("confidences must lie in [0, 1]")
    upper = bin_edges(num_bins)[1:]
    idx = np.minimum(np.searchsorted(upper, conf, side="left"), num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    mean_conf = np.zeros(num_bins)
    mean_acc = np.zeros(num_bins)
    for b in np.flatnonzero(counts):
        sel = idx == b
        mean_conf[b] = math.fsum(conf[sel]) / counts[b]
        mean_acc[b] = math.fsum(hits[sel]) / counts[b]
    return CalibrationBins(num_bins, counts, mean_conf, mean_acc)


def ece(confidences, correct, num_bins: int = 15) -> float:
    bins = calibration_bins(confidences, correct, num_bins)
    total = int(bins.counts.sum())
    return math.fsum(
        (int(bins.counts[b]) / total) * abs(bins.mean_accuracy[b] - bins.mean_confidence[b])
        for b in np.flatnonzero(bins.counts)
    )


def accuracy(predicted, labels) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.size == 0:
        raise MetricInputError("no samples")
    return float(np.mean(predicted == labels))


@dataclass
class MetricsReport:
    auroc: float
    fpr95: float
    aupr: float
    ece: float
    accuracy: float


def ood_metrics(id_scores, ood_scores) -> dict:
    return {
        "auroc": auroc(id_scores, ood_scores),
        "fpr95": fpr_at_tpr(id_scores, ood_scores, 0.95),
        "aupr": aupr(id_scores, ood_scores),
    }
