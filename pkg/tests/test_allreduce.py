import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from moshpit_lab.allreduce import (
    BandwidthProfile,
    PartitionWeights,
    balance_partition,
    butterfly_allreduce,
    chunk_sizes,
    grouped_allreduce,
    transfer_times,
)


def test_group_of_three_scalars():
    res = butterfly_allreduce([1.0, 2.0, 3.0])
    assert np.allclose(res.outputs, 2.0)
    assert res.chunks == [0, 1, 2] and res.completed


def test_group_of_one_is_identity():
    res = butterfly_allreduce([[4.0, 5.0]])
    assert np.array_equal(res.outputs, [[4.0, 5.0]]) and res.chunks == [0]


def test_weighted_chunks():
    w = PartitionWeights((0.5, 1 / 6, 1 / 6, 1 / 6))
    assert chunk_sizes(w, 8) == [4, 2, 1, 1]
    vecs = np.random.default_rng(0).standard_normal((4, 8))
    res = butterfly_allreduce(vecs, w)
    assert res.bounds == [(0, 4), (4, 6), (6, 7), (7, 8)]
    assert np.allclose(res.outputs, vecs.mean(axis=0), atol=1e-15)


def test_failure_voids_group():
    vecs = np.arange(6.0).reshape(3, 2)
    res = butterfly_allreduce(vecs, failed=[False, True, False])
    assert not res.completed
    assert np.array_equal(res.outputs, vecs)
    assert res.chunks == [0, 1, 2]


def test_weight_validation():
    with pytest.raises(ValueError):
        PartitionWeights((0.5, 0.6))
    with pytest.raises(ValueError):
        PartitionWeights((1.5, -0.5))
    with pytest.raises(ValueError):
        butterfly_allreduce([1.0, 2.0], PartitionWeights((1.0,)))
    with pytest.raises(ValueError):
        BandwidthProfile((1.0, 0.0))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 100))
def test_chunk_sizes_sum(raw, s):
    total = sum(raw)
    w = PartitionWeights(tuple(x / total for x in raw)) if total > 0 else PartitionWeights.uniform(len(raw))
    sizes = chunk_sizes(w, s)
    assert sum(sizes) == s and min(sizes) >= 0
    assert all(abs(size - wi * s) < 1 for size, wi in zip(sizes, w.w))


@settings(max_examples=60)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**31), st.floats(0, 0.5))
def test_grouped_allreduce_matches_per_group(n, k, seed, p):
    gen = np.random.default_rng(seed)
    values = gen.standard_normal((n, 3)) * 100
    labels = gen.integers(0, k, n)
    priority = gen.permutation(n)
    failed = gen.random(n) < p
    out, ranks, ok = grouped_allreduce(values, labels, priority, failed)
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        order = idx[np.argsort(priority[idx])]
        assert list(ranks[order]) == list(range(len(idx)))
        ref = butterfly_allreduce(values[order], failed=failed[order])
        assert np.allclose(out[order], ref.outputs, rtol=1e-13, atol=1e-12)
        assert ok[idx].all() == ref.completed
        # group-mean conservation, failure or not
        assert np.allclose(out[idx].sum(axis=0), values[idx].sum(axis=0), rtol=1e-12, atol=1e-10)


def test_balance_examples():
    w, obj = balance_partition(BandwidthProfile((1.0, 1.0, 2.0)))
    assert np.allclose(w.w, (0.0, 0.0, 1.0), atol=1e-12) and obj == pytest.approx(1.0, abs=1e-12)
    w, obj = balance_partition(BandwidthProfile((3.0,) * 4))
    assert np.allclose(w.w, 0.25, atol=1e-12)
    w, obj = balance_partition(BandwidthProfile((1.0, 4.0)))
    assert w.w == (0.5, 0.5) and obj == pytest.approx(1.0)
    assert max(transfer_times(PartitionWeights((0.9, 0.1)), BandwidthProfile((1.0, 4.0)))) == pytest.approx(1.0)


def _grid_min(b, resolution):
    M = len(b)
    best = np.inf
    steps = int(round(1 / resolution))
    if M == 3:
        i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = i + j <= steps
        w = np.stack([i[keep], j[keep], steps - i[keep] - j[keep]], axis=1) / steps
        return float(np.min(np.max((1 + (M - 2) * w) / b, axis=1)))
    for combo in np.ndindex(*(steps + 1,) * (M - 1)):
        if sum(combo) <= steps:
            w = np.array(combo + (steps - sum(combo),)) / steps
            best = min(best, float(np.max((1 + (M - 2) * w) / b)))
    return best


def test_balance_beats_grid_search_m3():
    gen = np.random.default_rng(5)
    for _ in range(5):
        b = gen.uniform(0.1, 10.0, 3)
        _, obj = balance_partition(BandwidthProfile(tuple(b)))
        assert obj <= _grid_min(b, 1e-3) + 1e-12


def _lp_optimum(b):
    M = len(b)
    # variables (w_1..w_M, xi); minimise xi s.t. (1 + (M-2) w_i)/b_i <= xi
    c = np.r_[np.zeros(M), 1.0]
    A = np.c_[np.diag((M - 2) / b), -np.ones(M)]
    ub = -1.0 / b
    res = linprog(c, A_ub=A, b_ub=ub, A_eq=[np.r_[np.ones(M), 0.0]], b_eq=[1.0], bounds=[(0, None)] * (M + 1))
    return res.fun


def test_balance_matches_lp_solver():
    gen = np.random.default_rng(11)
    for _ in range(200):
        M = int(gen.integers(3, 7))
        b = gen.uniform(0.05, 20.0, M)
        w, obj = balance_partition(BandwidthProfile(tuple(b)))
        assert obj == pytest.approx(_lp_optimum(b), rel=1e-9)
        times = np.array(transfer_times(w, BandwidthProfile(tuple(b))))
        active = np.array(w.w) > 0
        assert np.all(times <= obj * (1 + 1e-9))
        # unless a zero-weight peer's fixed cost dominates, active peers are tight
        if obj > np.max(1.0 / b) * (1 + 1e-9):
            assert np.allclose(times[active], obj, rtol=1e-9)
