"""Binary checkpoint format.

Layout, little-endian::

    b"MOONCKPT"                     8 bytes
    version                         u32 (= 1)
    layer count                     u32
    per layer:
        n_out, n_in                 u32, u32
        mask                        ceil(n_out * n_in / 8) bytes, row-major,
                                    most significant bit first, zero padded
        weights                     n_out * n_in f64, row-major
        biases                      n_out f64
    config digest                   32 bytes (SHA-256)

The class count is the last layer's ``n_out - 1``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .network import Layer, SparseNetwork

MAGIC = b"MOONCKPT"
VERSION = 1
DIGEST_BYTES = 32


class CheckpointError(ValueError):
    pass


def to_bytes(net: SparseNetwork, digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        n_out, n_in = layer.weight.shape
        parts.append(struct.pack("<II", n_out, n_in))
        parts.append(np.packbits(layer.mask.reshape(-1), bitorder="big").tobytes())
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    parts.append(digest)
    return b"".join(parts)


def from_bytes(blob: bytes) -> tuple[SparseNetwork, bytes]:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, n_layers = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        n_out, n_in = struct.unpack("<II", take(8))
        size = n_out * n_in
        bits = np.frombuffer(take((size + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits, count=size, bitorder="big").astype(bool).reshape(n_out, n_in)
        weight = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(n_out, n_in)
        bias = np.frombuffer(take(8 * n_out), dtype="<f8").astype(np.float64)
        layers.append(Layer(weight, bias, mask))
    digest = take(DIGEST_BYTES)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after digest")
    if not layers:
        raise CheckpointError("checkpoint holds no layers")
    net = SparseNetwork(layers, layers[-1].weight.shape[0] - 1)
    if not net.check_masks():
        raise CheckpointError("stored weights are nonzero outside their mask")
    return net, digest


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, net: SparseNetwork, digest: bytes):
    atomic_write(path, to_bytes(net, digest))


def load(path) -> tuple[SparseNetwork, bytes]:
    return from_bytes(Path(path).read_bytes())
