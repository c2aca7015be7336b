"""Local unreliability probes on two-class Gaussian mixtures.

The feature map is the identity: inputs are drawn straight from the mixture.
For an anchor ``x0`` and radius ``eps``, the unreliability gap is

    E_ball[ max_c N(x; mu_c, Sigma_c) ] - E_ball[ 1{y_hat == y} ]

estimated by rejection sampling mixture draws that land in the L2 ball.
The first term is a raw density, so it is used as-is even when it exceeds 1
(such cases are flagged, not clamped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Component, GaussianMixtureSpec
from .network import SparseNetwork, predict_from_probs, predict_proba
from .numeric import gaussian_log_density
from .rng import SeededRng

MIN_BALL_SAMPLES = 30


class InsufficientSamplesError(RuntimeError):
    def __init__(self, achieved, needed):
        super().__init__(f"only {achieved} mixture draws landed in the ball (need >= {needed})")
        self.achieved = achieved


@dataclass(frozen=True)
class UnreliabilityProbe:
    anchor: np.ndarray
    radius: float
    threshold: float = 0.05
    samples: int = 400

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if self.samples < 100:
            raise ValueError("need a budget of at least 100 samples")


@dataclass
class GapEstimate:
    density_term: float
    accuracy_term: float
    n_in_ball: int
    draws: int
    density_above_one: bool
    mean_confidence: float
    mean_unknown: float

    @property
    def gap(self) -> float:
        return self.density_term - self.accuracy_term

    def unreliable(self, threshold: float) -> bool:
        return self.gap > threshold

    @property
    def confidence_gap(self) -> float:
        """Same discrepancy with the model's own max first-K probability as confidence."""
        return self.mean_confidence - self.accuracy_term


def max_component_density(gm: GaussianMixtureSpec, x) -> np.ndarray:
    logs = np.stack([gaussian_log_density(x, c.mean, c.chol_cov) for c in gm.components])
    return np.exp(np.max(logs, axis=0))


def ball_samples(gm: GaussianMixtureSpec, probe: UnreliabilityProbe, rng: SeededRng):
    """Mixture draws inside the probe ball, up to ``probe.samples`` of them.

    Draws stop after ``100 * probe.samples`` attempts.
    """
    anchor = np.asarray(probe.anchor, dtype=np.float64)
    want, cap = probe.samples, 100 * probe.samples
    xs, ys, draws, have = [], [], 0, 0
    while have < want and draws < cap:
        chunk = min(max(want, 1000), cap - draws)
        x, y = gm.sample(rng, chunk)
        draws += chunk
        inside = np.linalg.norm(x - anchor, axis=1) < probe.radius
        xs.append(x[inside])
        ys.append(y[inside])
        have += int(inside.sum())
    x, y = np.vstack(xs)[:want], np.concatenate(ys)[:want]
    if x.shape[0] < MIN_BALL_SAMPLES:
        raise InsufficientSamplesError(x.shape[0], MIN_BALL_SAMPLES)
    return x, y, draws


def estimate_gap(model: SparseNetwork, gm: GaussianMixtureSpec, probe: UnreliabilityProbe,
                 rng: SeededRng) -> GapEstimate:
    x, y, draws = ball_samples(gm, probe, rng)
    density = max_component_density(gm, x)
    probs = predict_proba(model, x)
    k = model.num_classes
    correct = predict_from_probs(probs, k) == y
    return GapEstimate(
        density_term=float(np.mean(density)),
        accuracy_term=float(np.mean(correct)),
        n_in_ball=int(x.shape[0]),
        draws=draws,
        density_above_one=bool(np.any(density > 1.0)),
        mean_confidence=float(np.mean(np.max(probs[:, :k], axis=1))),
        mean_unknown=float(np.mean(probs[:, k])),
    )


def gap(model: SparseNetwork, gm: GaussianMixtureSpec, probe: UnreliabilityProbe,
        rng: SeededRng) -> float:
    return estimate_gap(model, gm, probe, rng).gap


def third_component(gm: GaussianMixtureSpec, offset) -> Component:
    """Unseen component: the mean of the class means moved by ``offset``, average covariance factor."""
    centre = np.mean([c.mean for c in gm.components], axis=0)
    chol = np.mean([c.chol_cov for c in gm.components], axis=0)
    return Component(centre + np.asarray(offset, dtype=np.float64), chol, 1.0, 1)


@dataclass
class AnchorResult:
    anchor_index: int
    anchor: np.ndarray
    ce: GapEstimate
    moon: GapEstimate


@dataclass
class OodResult:
    n: int
    msp_ce: float
    msp_moon: float
    unknown_ce: float
    unknown_moon: float


@dataclass
class InsightReport:
    kind: str
    anchors: list
    ood: OodResult | None = None

    def fraction(self, predicate) -> float:
        return float(np.mean([predicate(a) for a in self.anchors])) if self.anchors else float("nan")


def misclassified_anchors(model: SparseNetwork, x, y, limit: int) -> np.ndarray:
    """Indices of the first ``limit`` samples the model gets wrong, in data order."""
    wrong = np.flatnonzero(predict_from_probs(predict_proba(model, x), model.num_classes) != y)
    return wrong[:limit]


def insight_check(kind: str, ce_model: SparseNetwork, moon_model: SparseNetwork,
                  gm: GaussianMixtureSpec, probes, seed: int = 0, ood_component=None,
                  ood_samples: int = 2000) -> InsightReport:
    """Compare a cross-entropy and a MOON model on hard-ID anchors or on unseen-component data.

    ``hard-id``: each probe is evaluated for both models on the same ball
    samples, so the density term is shared and only the accuracy term (and
    the model diagnostics) differ. ``ood``: mean max first-K probability and
    mean unknown-slot mass on draws from ``ood_component``.
    """
    if kind == "hard-id":
        rows = []
        for i, probe in enumerate(probes):
            ce = estimate_gap(ce_model, gm, probe, SeededRng(seed * 1_000_003 + i))
            moon = estimate_gap(moon_model, gm, probe, SeededRng(seed * 1_000_003 + i))
            rows.append(AnchorResult(i, np.asarray(probe.anchor), ce, moon))
        return InsightReport(kind, rows)
    if kind == "ood":
        if ood_component is None:
            raise ValueError("ood check needs the unseen component")
        rng = SeededRng(seed * 1_000_003 + 999_983)
        comp = GaussianMixtureSpec([Component(ood_component.mean, ood_component.chol_cov, 1.0, 1)])
        x, _ = comp.sample(rng, ood_samples)
        p_ce, p_moon = predict_proba(ce_model, x), predict_proba(moon_model, x)
        k = ce_model.num_classes
        return InsightReport(kind, [], OodResult(
            ood_samples,
            float(np.mean(p_ce[:, :k].max(axis=1))),
            float(np.mean(p_moon[:, :k].max(axis=1))),
            float(np.mean(p_ce[:, k])),
            float(np.mean(p_moon[:, k])),
        ))
    raise ValueError(f"unknown insight kind {kind!r}")
