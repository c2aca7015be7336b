"""Build the bundled 5k MNIST subset as IDX files.

Source: the ``mnist_5k.csv.gz`` file shipped inside the mlxtend wheel
(BSD-3, 500 images per digit drawn from the official MNIST release).

    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/build_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist5k

Per digit, the first 400 rows go to ``train`` and the last 100 to ``t10k``;
each split is then shuffled with a fixed permutation.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from moonsparse.data import write_idx_images, write_idx_labels


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    digits = table[:, -1].astype(np.uint8)

    train_idx, test_idx = [], []
    for d in range(10):
        rows = np.flatnonzero(digits == d)
        train_idx.extend(rows[:400])
        test_idx.extend(rows[400:])
    perm_rng = np.random.default_rng(20240101)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = np.asarray(idx)[perm_rng.permutation(len(idx))]
        images = pixels[idx].reshape(-1, 28, 28)
        with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
            fh.write(write_idx_images(images))
        with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
            fh.write(write_idx_labels(digits[idx]))
        print(prefix, len(idx))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
