"""Config-driven runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, RunConfig
from .data import (
    DataConfigError,
    Dataset,
    GaussianMixtureSpec,
    load_mnist,
    make_ood,
    remove_classes,
    split,
    synth_gm,
    two_gaussian_spec,
)
from .detectors import DetectorSpec, Scorer, msp_from_probs
from .metrics import accuracy, ece, ood_metrics
from .network import SparseNetwork, predict_from_probs, predict_proba
from .rng import SeededRng
from .theory import (
    InsufficientSamplesError,
    UnreliabilityProbe,
    estimate_gap,
    insight_check,
    misclassified_anchors,
    third_component,
)
from .trainer import TrainResult, train

OOD_KINDS = ("heldout", "uniform", "shifted")


def derive_seed(seed: int, tag: str) -> int:
    """Independent 64-bit stream seed for a named purpose."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    ood: dict = field(default_factory=dict)
    mixture: GaussianMixtureSpec | None = None

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def mixture_of(rc: RunConfig) -> GaussianMixtureSpec:
    return two_gaussian_spec(rc["dataset.gm_separation"], rc["dataset.gm_sigma"], rc["dataset.gm_dim"])


def _vector(rc: RunConfig, key: str, dim: int) -> np.ndarray:
    vec = np.asarray(rc[key], dtype=np.float64)
    if vec.shape != (dim,):
        raise ConfigError(f"{key}: expected {dim} comma-separated values, got {vec.size}")
    return vec


def prepare_data(rc: RunConfig, seed: int | None = None) -> DataBundle:
    seed = rc["seed"] if seed is None else seed
    kind = rc["dataset.kind"]
    try:
        if kind == "mnist-heldout":
            directory = rc.resolve_path(rc["dataset.mnist_dir"])
            try:
                full, test_full = load_mnist(directory, "train"), load_mnist(directory, "test")
            except FileNotFoundError as exc:
                raise ConfigError(f"dataset.mnist_dir: {exc}") from exc
            held = [d + 1 for d in rc["dataset.heldout_digits"]]
            if not held:
                raise ConfigError("dataset.heldout_digits must name at least one digit")
            id_train = remove_classes(full, held, "mnist-id-train")
            train_set, val_set = split(id_train, rc["dataset.val_fraction"],
                                       SeededRng(derive_seed(seed, "split")))
            test = remove_classes(test_full, held, "mnist-id-test")
            bundle = DataBundle(train_set, val_set, test)
            for name in rc["ood.sets"]:
                if name == "heldout":
                    bundle.ood[name] = make_ood(test_full, "held-out-classes", classes=held, name=name)
                elif name == "uniform":
                    bundle.ood[name] = make_ood(id_train, "uniform-box", SeededRng(derive_seed(seed, name)),
                                                n=rc["ood.n"], name=name)
                else:
                    raise ConfigError(f"ood.sets: {name!r} is not available for mnist-heldout "
                                      "(use heldout, uniform)")
            return bundle
        gm = mixture_of(rc)
        full = synth_gm(gm, rc["dataset.gm_train_per_class"], SeededRng(derive_seed(seed, "gm-train")))
        train_set, val_set = split(full, rc["dataset.val_fraction"], SeededRng(derive_seed(seed, "split")))
        test = synth_gm(gm, rc["dataset.gm_test_per_class"], SeededRng(derive_seed(seed, "gm-test")))
        bundle = DataBundle(train_set, val_set, test, mixture=gm)
        sigma = rc["dataset.gm_sigma"]
        for name in rc["ood.sets"]:
            rng = SeededRng(derive_seed(seed, name))
            if name == "shifted":
                offset = _vector(rc, "ood.shift", gm.dim) * sigma
                per = max(1, rc["ood.n"] // len(gm.components))
                bundle.ood[name] = make_ood(gm, "shifted-mixture", rng, n=per, offset=offset, name=name)
            elif name == "uniform":
                bundle.ood[name] = make_ood(full, "uniform-box", rng, n=rc["ood.n"], name=name)
            else:
                raise ConfigError(f"ood.sets: {name!r} is not available for gm (use shifted, uniform)")
        return bundle
    except DataConfigError as exc:
        raise ConfigError(str(exc)) from exc


def run_training(rc: RunConfig, bundle: DataBundle | None = None, loss: str | None = None,
                 seed: int | None = None, on_epoch=None, inspect=None) -> TrainResult:
    bundle = bundle or prepare_data(rc, seed)
    cfg = rc.train_config(loss=loss, seed=seed)
    val = bundle.val if len(bundle.val) else None
    return train(cfg, bundle.train, val, on_epoch, inspect)


def check_compatible(net: SparseNetwork, bundle: DataBundle):
    if net.input_dim != bundle.train.dim or net.num_classes != bundle.num_classes:
        raise ConfigError(
            f"checkpoint expects {net.input_dim} inputs and {net.num_classes} classes, "
            f"data has {bundle.train.dim} and {bundle.num_classes}"
        )


def detector_specs(rc: RunConfig) -> list:
    specs = []
    for kind in rc["ood.detectors"]:
        try:
            if kind == "odin":
                spec = DetectorSpec(kind, rc["ood.odin_temperature"], rc["ood.odin_epsilon"])
            elif kind == "ebo":
                spec = DetectorSpec(kind, rc["ood.ebo_temperature"])
            elif kind == "knn":
                spec = DetectorSpec(kind, k=rc["ood.knn_k"] or None)
            else:
                spec = DetectorSpec(kind)
        except ValueError as exc:
            raise ConfigError(f"ood.detectors: {exc}") from exc
        spec.include_unknown = rc["ood.include_unknown"]
        specs.append(spec)
    return specs


def evaluate_ood(rc: RunConfig, net: SparseNetwork, bundle: DataBundle | None = None):
    """Rows ``(detector, ood_set, auroc, fpr95, aupr)`` and the ID ``(accuracy, ece)`` pair."""
    if not rc["ood.sets"]:
        raise ConfigError("ood.sets is empty; list at least one OOD set")
    if not rc["ood.detectors"]:
        raise ConfigError("ood.detectors is empty; list at least one detector")
    specs = detector_specs(rc)
    bundle = bundle or prepare_data(rc)
    check_compatible(net, bundle)
    val_inputs = bundle.val.inputs if len(bundle.val) else bundle.train.inputs
    scorer = Scorer.fit(net, bundle.train.inputs, val_inputs)
    rows = []
    for spec in specs:
        id_scores = scorer.score(spec, bundle.test.inputs)
        for name, ood in bundle.ood.items():
            m = ood_metrics(id_scores, scorer.score(spec, ood.inputs))
            rows.append((spec.kind, name, m["auroc"], m["fpr95"], m["aupr"]))
    probs = predict_proba(net, bundle.test.inputs)
    k = net.num_classes
    pred = predict_from_probs(probs, k)
    conf = msp_from_probs(probs, k)
    id_metrics = (accuracy(pred, bundle.test.labels), ece(conf, pred == bundle.test.labels, rc["ood.ece_bins"]))
    return rows, id_metrics, scorer


THEORY_COLUMNS = (
    "seed", "kind", "anchor", "n_ball", "density_term", "density_above_one",
    "acc_ce", "acc_moon", "gap_ce", "gap_moon", "conf_gap_ce", "conf_gap_moon",
    "unknown_ce", "unknown_moon", "msp_ce", "msp_moon",
)


@dataclass
class TheoryBlock:
    seed: int
    hard_id: object
    ood: object
    skipped: int


def theory_block(rc: RunConfig, seed: int) -> TheoryBlock:
    """Paired CE/MOON run on the mixture preset, probed at CE-misclassified test anchors.

    Anchors whose ball catches too few mixture draws are skipped in favour of
    the next misclassified sample.
    """
    if rc["dataset.kind"] != "gm":
        raise ConfigError("theory-sim needs dataset.kind = gm")
    bundle = prepare_data(rc, seed)
    gm = bundle.mixture
    ce = run_training(rc, bundle, "cross-entropy", seed).net
    moon = run_training(rc, bundle, "moon", seed).net
    sigma = rc["dataset.gm_sigma"]
    wanted = rc["theory.anchors"]
    candidates = misclassified_anchors(ce, bundle.test.inputs, bundle.test.labels, len(bundle.test))
    probes, skipped = [], 0
    for idx in candidates:
        if len(probes) == wanted:
            break
        probe = UnreliabilityProbe(bundle.test.inputs[idx], rc["theory.radius"] * sigma,
                                   samples=rc["theory.samples"])
        try:
            estimate_gap(ce, gm, probe, SeededRng(derive_seed(seed, f"feasible:{idx}")))
        except InsufficientSamplesError:
            skipped += 1
            continue
        probes.append(probe)
    hard = insight_check("hard-id", ce, moon, gm, probes, seed)
    offset = _vector(rc, "theory.ood_offset", gm.dim) * sigma
    ood = insight_check("ood", ce, moon, gm, [], seed, ood_component=third_component(gm, offset),
                        ood_samples=rc["theory.ood_samples"])
    return TheoryBlock(seed, hard, ood.ood, skipped)


def theory_rows(block: TheoryBlock) -> list:
    rows = []
    for a in block.hard_id.anchors:
        rows.append((block.seed, "hard-id", a.anchor_index, a.ce.n_in_ball, a.ce.density_term,
                     a.ce.density_above_one, a.ce.accuracy_term, a.moon.accuracy_term,
                     a.ce.gap, a.moon.gap, a.ce.confidence_gap, a.moon.confidence_gap,
                     a.ce.mean_unknown, a.moon.mean_unknown, a.ce.mean_confidence, a.moon.mean_confidence))
    o = block.ood
    rows.append((block.seed, "ood", None, o.n, None, None, None, None, None, None, None, None,
                 o.unknown_ce, o.unknown_moon, o.msp_ce, o.msp_moon))
    return rows
