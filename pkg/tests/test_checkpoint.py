import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moonsparse import checkpoint
from moonsparse.checkpoint import CheckpointError, from_bytes, to_bytes
from moonsparse.network import SparseNetwork
from moonsparse.rng import SeededRng

DIGEST = hashlib.sha256(b"cfg").digest()


def sparse_net(seed, dims=(7, 5, 4)):
    rng = SeededRng(seed)
    masks = [rng.uniform(o * i).reshape(o, i) < 0.5 for i, o in zip(dims[:-1], dims[1:])]
    return SparseNetwork.initialize(list(dims), dims[-1] - 1, rng, masks)


@given(st.integers(0, 10**6), st.lists(st.integers(1, 9), min_size=2, max_size=4))
def test_round_trip_is_bitwise(seed, dims):
    dims[-1] = max(dims[-1], 2)
    net = sparse_net(seed, tuple(dims))
    blob = to_bytes(net, DIGEST)
    back, digest = from_bytes(blob)
    assert digest == DIGEST
    for a, b in zip(net.layers, back.layers):
        assert a.weight.tobytes() == b.weight.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        assert np.array_equal(a.mask, b.mask)
    assert to_bytes(back, digest) == blob


def test_layout_header_and_trailer():
    net = sparse_net(0)
    blob = to_bytes(net, DIGEST)
    assert blob[:8] == b"MOONCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:16], "little") == 2
    assert int.from_bytes(blob[16:20], "little") == 5 and int.from_bytes(blob[20:24], "little") == 7
    mask_bytes = blob[24:24 + 5]  # 35 bits -> 5 bytes
    assert np.array_equal(np.unpackbits(np.frombuffer(mask_bytes, np.uint8), count=35).astype(bool),
                          net.layers[0].mask.reshape(-1))
    assert blob[-32:] == DIGEST


def test_corrupt_checkpoints_rejected():
    blob = to_bytes(sparse_net(1), DIGEST)
    for bad in (b"NOTACKPT" + blob[8:], blob[:-1], blob + b"\x00",
                blob[:8] + (2).to_bytes(4, "little") + blob[12:]):
        with pytest.raises(CheckpointError):
            from_bytes(bad)
    with pytest.raises(CheckpointError):
        to_bytes(sparse_net(1), b"short")


def test_atomic_save_and_load(tmp_path):
    net = sparse_net(2)
    path = tmp_path / "sub" / "ckpt"
    checkpoint.save(path, net, DIGEST)
    assert [p.name for p in path.parent.iterdir()] == ["ckpt"]
    back, digest = checkpoint.load(path)
    assert digest == DIGEST and to_bytes(back, digest) == path.read_bytes()
