import numpy as np
import pytest
from hypothesis import given, strategies as st

from moonsparse.network import Layer, SparseNetwork
from moonsparse.rng import SeededRng
from moonsparse.sparsity import (
    SparsityConfigError,
    TopologySchedule,
    erk_counts,
    erk_densities,
    erk_init,
    prune_grow,
)


def test_erk_worked_example():
    shapes = [(4, 4), (2, 4)]
    d = erk_densities(shapes, 0.5)
    assert d[0] == pytest.approx(0.5 * 12 / 14, rel=1e-12)
    assert d[1] == pytest.approx(0.75 * 12 / 14, rel=1e-12)
    assert erk_counts(shapes, 0.5) == [7, 5]


def test_erk_single_layer_density_is_one_minus_s():
    assert erk_densities([(10, 30)], 0.8) == [pytest.approx(0.2)]
    assert erk_counts([(10, 30)], 0.8) == [60]


def test_erk_near_zero_sparsity_is_dense():
    shapes = [(300, 784), (100, 300), (9, 100)]
    counts = erk_counts(shapes, 1e-9)
    assert counts == [a * b for a, b in shapes]


def test_erk_clamps_small_layers_dense():
    shapes = [(300, 784), (100, 300), (9, 100)]
    d = erk_densities(shapes, 0.9)
    assert d[2] == 1.0
    assert all(0.0 < v <= 1.0 for v in d)


@given(st.lists(st.tuples(st.integers(1, 40), st.integers(1, 40)), min_size=1, max_size=4),
       st.floats(0.05, 0.95))
def test_erk_counts_hit_global_target(shapes, s):
    try:
        counts = erk_counts(shapes, s)
    except SparsityConfigError:
        return
    total = sum(a * b for a, b in shapes)
    assert sum(counts) == int(np.floor((1 - s) * total + 0.5))
    assert all(1 <= c <= a * b for c, (a, b) in zip(counts, shapes))


def test_erk_rejects_invalid_sparsity():
    for s in (0.0, 1.0, -0.1):
        with pytest.raises(SparsityConfigError):
            erk_densities([(2, 2)], s)
    with pytest.raises(SparsityConfigError):
        erk_counts([(1, 1), (50, 50)], 0.9999)


def test_erk_init_counts_and_determinism():
    shapes = [(30, 20), (5, 30)]
    a = erk_init(shapes, 0.7, SeededRng(3))
    b = erk_init(shapes, 0.7, SeededRng(3))
    assert [int(m.sum()) for m in a] == erk_counts(shapes, 0.7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_fraction_schedule_examples():
    sched = TopologySchedule()
    assert sched.fraction_at(0, 100) == pytest.approx(0.3)
    assert sched.fraction_at(35, 100) == pytest.approx(0.15)
    assert sched.fraction_at(70, 100) == 0.0
    assert sched.fraction_at(95, 100) == 0.0


@given(st.floats(0, 100), st.floats(0, 100))
def test_fraction_schedule_bounded_and_nonincreasing(t1, t2):
    sched = TopologySchedule()
    lo, hi = min(t1, t2), max(t1, t2)
    f_lo, f_hi = sched.fraction_at(lo, 100), sched.fraction_at(hi, 100)
    assert 0.0 <= f_hi <= f_lo <= 0.3 + 1e-15


def _net(weights, mask=None):
    w = np.array(weights, dtype=np.float64)
    mask = np.ones_like(w, dtype=bool) if mask is None else np.array(mask, bool)
    w = np.where(mask, w, 0.0)
    return SparseNetwork([Layer(w, np.zeros(w.shape[0]), mask)], w.shape[0] - 1)


def test_zero_fraction_is_noop():
    net = _net([[5.0, 0.1, 3.0], [1.0, 2.0, 4.0]])
    before = [l.mask.copy() for l in net.layers]
    prune_grow(net, "set", 0.0, SeededRng(0))
    assert np.array_equal(before[0], net.layers[0].mask)


def test_prunes_smallest_magnitude():
    net = _net([[5.0, 0.1, 3.0, 0.0]], mask=[[1, 1, 1, 0]])
    net = SparseNetwork([Layer(net.layers[0].weight.reshape(2, 2), np.zeros(2),
                               net.layers[0].mask.reshape(2, 2))], 1)
    upd = prune_grow(net, "rigl", 1 / 3, dense_grads=[np.array([[0, 0], [0, 1.0]])])
    assert upd[0].pruned.tolist() == [1]
    assert upd[0].grown.tolist() == [3]
    assert net.layers[0].weight.reshape(-1).tolist() == [5.0, 0.0, 3.0, 0.0]


def test_rigl_grows_largest_gradient_slot():
    w = [[1.0, 2.0, 0.0], [3.0, 0.0, 4.0]]
    mask = [[1, 1, 0], [1, 0, 1]]
    net = _net(w, mask)
    net = SparseNetwork([Layer(net.layers[0].weight, np.zeros(2), net.layers[0].mask)], 1)
    grads = [np.array([[0.0, 0.0, 0.9], [0.0, 0.1, 0.0]])]
    upd = prune_grow(net, "rigl", 0.25, dense_grads=grads)
    assert upd[0].pruned.tolist() == [0]
    assert upd[0].grown.tolist() == [2]
    assert net.layers[0].weight[0, 2] == 0.0 and net.layers[0].mask[0, 2]


def _random_sparse_net(seed):
    rng = SeededRng(seed)
    shapes = [(12, 10), (6, 12), (4, 6)]
    net = SparseNetwork.initialize([10, 12, 6, 4], 3, rng, erk_init(shapes, 0.6, rng))
    return net, rng


@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.sampled_from(["rigl", "set"]))
def test_prune_grow_preserves_counts_and_zero_growth(seed, fraction, method):
    net, rng = _random_sparse_net(seed)
    before = [l.nonzeros for l in net.layers]
    grads = [rng.standard_normal(l.weight.size).reshape(l.weight.shape) for l in net.layers]
    old = [l.weight.copy() for l in net.layers]
    updates = prune_grow(net, method, fraction, rng, grads)
    assert [int(l.mask.sum()) for l in net.layers] == before
    assert net.check_masks()
    for layer, upd, w0 in zip(net.layers, updates, old):
        assert np.all(layer.weight.reshape(-1)[upd.grown] == 0.0)
        newly = np.setdiff1d(upd.grown, upd.pruned)
        assert np.all(w0.reshape(-1)[newly] == 0.0)
        assert upd.shortfall == 0


@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_set_and_rigl_prune_the_same_weights(seed, fraction):
    net_a, rng = _random_sparse_net(seed)
    net_b = net_a.copy()
    grads = [rng.standard_normal(l.weight.size).reshape(l.weight.shape) for l in net_a.layers]
    ua = prune_grow(net_a, "rigl", fraction, dense_grads=grads)
    ub = prune_grow(net_b, "set", fraction, SeededRng(seed + 1))
    assert all(np.array_equal(a.pruned, b.pruned) for a, b in zip(ua, ub))


def test_prune_grow_argument_checks():
    net, rng = _random_sparse_net(0)
    with pytest.raises(ValueError):
        prune_grow(net, "rigl", 0.2, rng)
    with pytest.raises(ValueError):
        prune_grow(net, "set", 0.2)
    with pytest.raises(ValueError):
        prune_grow(net, "set", 1.5, rng)


def test_schedule_validation():
    with pytest.raises(SparsityConfigError):
        TopologySchedule(method="random")
    with pytest.raises(SparsityConfigError):
        TopologySchedule(initial_fraction=0.0)
    with pytest.raises(SparsityConfigError):
        TopologySchedule(update_interval=0)
