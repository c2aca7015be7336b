"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment. Unknown keys and malformed values
are rejected, and every missing required key is reported at once.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .moon import MoonConfig
from .sparsity import TopologySchedule
from .trainer import TrainConfig

PEAK_ONE_SIGMA = 1.0 / np.sqrt(2.0 * np.pi)


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(cast):
    def parse(text: str):
        text = text.strip()
        return tuple(cast(t.strip()) for t in text.split(",") if t.strip()) if text else ()
    parse.__name__ = f"list[{cast.__name__}]"
    return parse


# key -> (parser, default); a default of REQUIRED marks a required key
REQUIRED = object()
SCHEMA = {
    "seed": (int, REQUIRED),
    "dataset.kind": (str, REQUIRED),
    "dataset.mnist_dir": (str, "data/mnist5k"),
    "dataset.heldout_digits": (_list(int), (8, 9)),
    "dataset.val_fraction": (float, 0.1),
    "dataset.gm_dim": (int, 2),
    "dataset.gm_separation": (float, 1.0),
    "dataset.gm_sigma": (float, float(PEAK_ONE_SIGMA)),
    "dataset.gm_train_per_class": (int, 1000),
    "dataset.gm_test_per_class": (int, 500),
    "model.hidden": (_list(int), (300, 100)),
    "sparsity.level": (float, 0.9),
    "sparsity.method": (str, "rigl"),
    "sparsity.initial_fraction": (float, 0.3),
    "sparsity.freeze": (float, 0.7),
    "sparsity.interval": (int, 100),
    "moon.t_e": (int, 5),
    "moon.w_f": (float, 1.0),
    "moon.r": (float, 64.0),
    "moon.alpha": (float, 0.1),
    "moon.gradient": (str, "full"),
    "train.epochs": (int, REQUIRED),
    "train.loss": (str, REQUIRED),
    "train.batch_size": (int, 128),
    "train.lr_max": (float, 0.1),
    "train.lr_min": (float, 0.001),
    "train.momentum": (float, 0.9),
    "train.vote": (_bool, True),
    "train.vote_start": (float, 0.8),
    "train.log_wall_time": (_bool, True),
    "ood.sets": (_list(str), ()),
    "ood.detectors": (_list(str), ()),
    "ood.n": (int, 1000),
    "ood.shift": (_list(float), (0.0, 3.0)),
    "ood.odin_temperature": (float, 1000.0),
    "ood.odin_epsilon": (float, 0.0014),
    "ood.ebo_temperature": (float, 1.0),
    "ood.knn_k": (int, 0),
    "ood.include_unknown": (_bool, False),
    "ood.ece_bins": (int, 15),
    "theory.seeds": (int, 3),
    "theory.anchors": (int, 20),
    "theory.radius": (float, 0.5),
    "theory.samples": (int, 400),
    "theory.ood_offset": (_list(float), (0.0, 2.0)),
    "theory.ood_samples": (int, 2000),
}

# keys that fix the data splits and network shape; a checkpoint is only
# meaningful together with a config that agrees on these
IDENTITY_PREFIXES = ("seed", "dataset.", "model.")

CHOICES = {
    "dataset.kind": ("mnist-heldout", "gm"),
    "sparsity.method": ("rigl", "set"),
    "moon.gradient": ("full", "stop"),
    "train.loss": ("moon", "cross-entropy"),
}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict
    source: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **pairs) -> "RunConfig":
        vals = dict(self.values)
        for k, v in pairs.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals, self.source)

    def canonical_text(self, prefixes=None) -> str:
        keys = sorted(self.values)
        if prefixes is not None:
            keys = [k for k in keys if k.startswith(prefixes)]
        return "".join(f"{k}={format_value(self.values[k])}\n" for k in keys)

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text(IDENTITY_PREFIXES).encode("utf-8")).digest()

    def resolve_path(self, value: str) -> Path:
        path = Path(value)
        if path.is_absolute() or path.exists() or self.source is None:
            return path
        return self.source.parent / path

    def train_config(self, loss: str | None = None, seed: int | None = None) -> TrainConfig:
        v = self.values
        epochs = v["train.epochs"]
        loss = loss or v["train.loss"]
        try:
            moon = None
            if loss == "moon":
                moon = MoonConfig(
                    total_epochs=epochs,
                    unknown_free_epochs=v["moon.t_e"],
                    final_weight=v["moon.w_f"],
                    init_factor=v["moon.r"],
                    smoothing=v["moon.alpha"],
                    full_gradient=v["moon.gradient"] == "full",
                )
            topology = TopologySchedule(
                sparsity=v["sparsity.level"],
                method=v["sparsity.method"],
                initial_fraction=v["sparsity.initial_fraction"],
                freeze_point=v["sparsity.freeze"],
                update_interval=v["sparsity.interval"],
            )
            return TrainConfig(
                epochs=epochs,
                hidden=tuple(v["model.hidden"]),
                batch_size=v["train.batch_size"],
                lr_max=v["train.lr_max"],
                lr_min=v["train.lr_min"],
                momentum=v["train.momentum"],
                sparsity=v["sparsity.level"],
                topology=topology,
                moon=moon,
                loss=loss,
                seed=v["seed"] if seed is None else seed,
                vote=v["train.vote"],
                vote_start=v["train.vote_start"],
                log_wall_time=v["train.log_wall_time"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_text(text: str, source: Path | None = None) -> RunConfig:
    raw, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key}")
        raw[key] = value
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        problems.append("unknown keys: " + ", ".join(unknown))
    missing = sorted(k for k, (_, d) in SCHEMA.items() if d is REQUIRED and k not in raw)
    if missing:
        problems.append("missing required keys: " + ", ".join(missing))
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key not in raw:
            if default is not REQUIRED:
                values[key] = default
            continue
        try:
            values[key] = parse(raw[key])
        except ValueError:
            problems.append(f"{key}: cannot parse {raw[key]!r} as {parse.__name__}")
            continue
        if key in CHOICES and values[key] not in CHOICES[key]:
            problems.append(f"{key}: {values[key]!r} not one of {', '.join(CHOICES[key])}")
    if problems:
        raise ConfigError("; ".join(problems))
    return RunConfig(values, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path)
