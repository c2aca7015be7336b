"""Datasets: MNIST IDX files, seeded Gaussian mixtures and OOD stand-ins.

Labels are 1-based class indices ``1..K`` throughout. IDX digit labels
``0..9`` map to classes ``1..10``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import as_f64, check_cholesky_factor, gaussian_sample
from .rng import SeededRng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


class IdxLengthError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(as_f64(self.inputs))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataConfigError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise DataConfigError(f"labels outside 1..{self.num_classes}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name, self.num_classes)


# ---------------------------------------------------------------- IDX files

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, n_words: int, path) -> tuple:
    need = 4 * n_words
    if len(raw) < need:
        raise IdxLengthError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    return struct.unpack(f">{n_words}I", raw[:need])


def _check_magic(actual: int, expected: int, path):
    if actual != expected:
        raise IdxFormatError(
            f"{path}: bad magic at offset 0: expected 0x{expected:08X}, found 0x{actual:08X}"
        )


def read_idx_images(path) -> np.ndarray:
    """``uint8`` array of shape ``(count, rows, cols)``."""
    raw = _read_bytes(path)
    magic = _header(raw, 1, path)[0]
    _check_magic(magic, IMAGE_MAGIC, path)
    _, count, rows, cols = _header(raw, 4, path)
    body = raw[16:]
    if len(body) != count * rows * cols:
        raise IdxLengthError(
            f"{path}: expected {count * rows * cols} pixel bytes after offset 16, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    magic = _header(raw, 1, path)[0]
    _check_magic(magic, LABEL_MAGIC, path)
    _, count = _header(raw, 2, path)
    body = raw[8:]
    if len(body) != count:
        raise IdxLengthError(f"{path}: expected {count} label bytes after offset 8, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).copy()


def write_idx_images(images) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">4I", IMAGE_MAGIC, count, rows, cols) + images.tobytes()


def write_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def parse_idx(image_path, label_path, name: str = "mnist") -> Dataset:
    images = read_idx_images(image_path)
    digits = read_idx_labels(label_path)
    if images.shape[0] != digits.shape[0]:
        raise IdxConsistencyError(
            f"{image_path} holds {images.shape[0]} images but {label_path} holds {digits.shape[0]} labels"
        )
    if digits.size and digits.max() > 9:
        raise IdxFormatError(f"{label_path}: label value {digits.max()} is not a digit")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(inputs, digits.astype(np.int64) + 1, name, 10)


def dataset_to_idx(dataset: Dataset, rows: int, cols: int) -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_idx` for datasets with 8-bit pixel values."""
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8).reshape(len(dataset), rows, cols)
    return write_idx_images(pixels), write_idx_labels(dataset.labels - 1)


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    prefix = {"train": "train", "test": "t10k"}[split]
    directory = Path(directory)
    return parse_idx(
        _find(directory, f"{prefix}-images-idx3-ubyte"),
        _find(directory, f"{prefix}-labels-idx1-ubyte"),
        name=f"mnist-{split}",
    )


# ---------------------------------------------------------- Gaussian mixtures

@dataclass
class Component:
    mean: np.ndarray
    chol_cov: np.ndarray
    weight: float
    label: int


@dataclass
class GaussianMixtureSpec:
    components: list = field(default_factory=list)

    def __post_init__(self):
        if not self.components:
            raise DataConfigError("mixture needs at least one component")
        weights = np.array([c.weight for c in self.components])
        if np.any(weights <= 0.0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DataConfigError("mixture weights must be positive and sum to 1")
        d = self.dim
        for c in self.components:
            c.mean = as_f64(c.mean)
            c.chol_cov = check_cholesky_factor(c.chol_cov)
            if c.mean.shape != (d,) or c.chol_cov.shape != (d, d):
                raise DataConfigError("component dimensions disagree")

    @property
    def dim(self) -> int:
        return np.asarray(self.components[0].mean).shape[0]

    @property
    def num_classes(self) -> int:
        return max(c.label for c in self.components)

    def shifted(self, offset) -> "GaussianMixtureSpec":
        offset = as_f64(offset)
        return GaussianMixtureSpec([
            Component(c.mean + offset, c.chol_cov.copy(), c.weight, c.label) for c in self.components
        ])

    def sample(self, rng: SeededRng, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` draws from the mixture: component by weight, then its Gaussian."""
        cdf = np.cumsum([c.weight for c in self.components])
        which = np.minimum(np.searchsorted(cdf, rng.uniform(n), side="right"), len(cdf) - 1)
        z = rng.standard_normal(n * self.dim).reshape(n, self.dim)
        x = np.empty((n, self.dim))
        for i, c in enumerate(self.components):
            sel = which == i
            x[sel] = c.mean + z[sel] @ c.chol_cov.T
        labels = np.array([self.components[i].label for i in which], dtype=np.int64)
        return x, labels


def two_gaussian_spec(separation: float, sigma: float = 1.0, dim: int = 2) -> GaussianMixtureSpec:
    """Two balanced isotropic components whose means are ``separation`` sigmas apart on axis 0."""
    half = 0.5 * separation * sigma
    chol = sigma * np.eye(dim)
    m1, m2 = np.zeros(dim), np.zeros(dim)
    m1[0], m2[0] = -half, half
    return GaussianMixtureSpec([Component(m1, chol, 0.5, 1), Component(m2, chol.copy(), 0.5, 2)])


def synth_gm(spec: GaussianMixtureSpec, n: int, rng: SeededRng, name: str = "gm") -> Dataset:
    """``n`` samples per component, grouped by component in spec order."""
    xs, ys = [], []
    for c in spec.components:
        xs.append(gaussian_sample(rng, c.mean, c.chol_cov, n))
        ys.append(np.full(n, c.label, dtype=np.int64))
    return Dataset(np.vstack(xs), np.concatenate(ys), name, spec.num_classes)


# ------------------------------------------------------------- OOD stand-ins

def remove_classes(dataset: Dataset, classes, name: str | None = None) -> Dataset:
    """Drop ``classes`` and renumber the remaining labels to ``1..K'`` in order."""
    classes = sorted(set(int(c) for c in classes))
    present = set(np.unique(dataset.labels).tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise DataConfigError(f"held-out classes {missing} are absent from {dataset.name}")
    keep = sorted(set(range(1, dataset.num_classes + 1)) - set(classes))
    remap = np.zeros(dataset.num_classes + 1, dtype=np.int64)
    remap[keep] = np.arange(1, len(keep) + 1)
    sel = ~np.isin(dataset.labels, classes)
    return Dataset(dataset.inputs[sel], remap[dataset.labels[sel]], name or dataset.name, len(keep))


def make_ood(source, kind: str, rng: SeededRng | None = None, *, n: int | None = None,
             offset=None, classes=None, low=None, high=None, name: str | None = None) -> Dataset:
    """Build an OOD set.

    ``shifted-mixture``: ``source`` is a mixture spec whose means move by
    ``offset``; ``n`` samples per component.
    ``uniform-box``: uniform over ``[low, high]`` or over the bounding box of a
    ``source`` dataset.
    ``held-out-classes``: the samples of ``source`` whose label is in
    ``classes``. Labels of OOD sets carry no meaning and are set to 1.
    """
    if kind == "shifted-mixture":
        if not isinstance(source, GaussianMixtureSpec) or offset is None or n is None:
            raise DataConfigError("shifted-mixture needs a mixture spec, an offset and n")
        ds = synth_gm(source.shifted(offset), n, rng, name or "shifted-mixture")
        return Dataset(ds.inputs, np.ones(len(ds), dtype=np.int64), ds.name, 1)
    if kind == "uniform-box":
        if low is None or high is None:
            if not isinstance(source, Dataset):
                raise DataConfigError("uniform-box needs explicit bounds or a dataset")
            low = source.inputs.min(axis=0) if low is None else low
            high = source.inputs.max(axis=0) if high is None else high
        low, high = np.broadcast_arrays(as_f64(low), as_f64(high))
        if n is None:
            raise DataConfigError("uniform-box needs n")
        u = rng.uniform(n * low.size).reshape(n, low.size)
        return Dataset(low + u * (high - low), np.ones(n, dtype=np.int64), name or "uniform-box", 1)
    if kind == "held-out-classes":
        if not isinstance(source, Dataset) or not classes:
            raise DataConfigError("held-out-classes needs a dataset and a class list")
        present = set(np.unique(source.labels).tolist())
        missing = sorted(set(classes) - present)
        if missing:
            raise DataConfigError(f"held-out classes {missing} are absent from {source.name}")
        sel = np.isin(source.labels, list(classes))
        return Dataset(source.inputs[sel], np.ones(int(sel.sum()), dtype=np.int64),
                       name or "held-out", 1)
    raise DataConfigError(f"unknown OOD kind {kind!r}")


# ------------------------------------------------------------ splits/batches

def split(dataset: Dataset, fraction: float, rng: SeededRng) -> tuple[Dataset, Dataset]:
    """Random disjoint split; the second part gets ``round(fraction * N)`` samples."""
    perm = rng.permutation(len(dataset))
    n_second = int(round(fraction * len(dataset)))
    second, first = np.sort(perm[:n_second]), np.sort(perm[n_second:])
    return dataset.subset(first), dataset.subset(second)


def batches(n: int, batch_size: int, rng: SeededRng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
