import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moshpit_lab.core import GridConfig
from moshpit_lab.dht import SimulatedDHT
from moshpit_lab.matchmaking import (
    Phase,
    Priority,
    chunk_ranks,
    decode_key,
    encode_key,
    form_groups,
    ideal_groups,
    initial_index,
    next_group_key,
    timeout_budget,
)


def test_priority_order():
    assert Priority(1.0, 5) < Priority(2.0, 0)
    assert Priority(1.0, 0) < Priority(1.0, 1)


def test_initial_index_examples():
    grid = GridConfig(3, 2)
    assert [initial_index(i, grid) for i in range(9)] == [(0,)] * 3 + [(1,)] * 3 + [(2,)] * 3
    assert initial_index(3, GridConfig(5, 1)) == ()
    assert initial_index(5, GridConfig(2, 3)) == (0, 1)
    with pytest.raises(ValueError):
        initial_index(9, grid)


@pytest.mark.parametrize("M,d", [(2, 2), (3, 3), (4, 2), (5, 3)])
def test_initial_preimage_at_most_M(M, d):
    grid = GridConfig(M, d)
    counts = {}
    for i in range(grid.capacity):
        key = initial_index(i, grid)
        assert len(key) == d - 1
        counts[key] = counts.get(key, 0) + 1
    assert max(counts.values()) <= M


def test_next_group_key():
    assert next_group_key((0, 1), 2, 3) == (1, 2)
    assert next_group_key((), 0, 3) == ()
    assert next_group_key((1, 1), 0, 3) != next_group_key((1, 1), 1, 3)
    with pytest.raises(ValueError):
        next_group_key((0,), 3, 3)


@given(st.integers(2, 7), st.lists(st.integers(0, 6), max_size=4))
def test_key_encoding_roundtrip(M, digits):
    key = tuple(d % M for d in digits)
    assert decode_key(encode_key(key, M), M, len(key)) == key


def _match(n, **kwargs):
    keys = {i: (0,) for i in range(n)}
    return form_groups(0, keys, SimulatedDHT(ttl=1000.0, n_nodes=max(n, 1)), kwargs.pop("size", 8), **kwargs)


def test_four_peers_one_group_lowest_leader():
    ts = {0: 3.0, 1: 1.0, 2: 2.0, 3: 0.5}
    res = _match(4, size=4, timestamps=ts)
    assert res.groups == [(3, 1, 2, 0)]
    assert all(s.phase is Phase.GROUP_SEALED and s.leader == 3 for s in res.states.values())


def test_leader_failure_mid_collection_survivors_regroup():
    ts = {i: float(i) for i in range(4)}
    for fail_at in (0.0, 0.5, 1.0, 2.9):
        res = _match(4, size=4, timestamps=ts, fail_times={0: fail_at}, latency=0.25)
        assert res.groups == [(1, 2, 3)], fail_at
        assert res.states[0].phase is Phase.FAILED


def test_singleton():
    res = form_groups(0, {0: ()}, SimulatedDHT(), 4)
    assert res.groups == [(0,)]


def test_excess_joiners_rejected():
    res = _match(7, size=3)
    assert sorted(len(g) for g in res.groups) == [1, 3, 3]
    assert sorted(q for g in res.groups for q in g) == list(range(7))


def test_latency_must_beat_timeout():
    with pytest.raises(ValueError):
        _match(2, latency=2.0, timeout=3.0)


def _check_schedule(n, gen):
    starts = {i: float(gen.integers(0, 3)) for i in range(n)}
    ts = {i: starts[i] + float(gen.random()) for i in range(n)}
    fails = {i: float(gen.random() * 12) for i in range(n) if gen.random() < 0.3}
    latency = float(gen.choice([0.0, 0.5, 1.0]))
    res = _match(n, timestamps=ts, starts=starts, fail_times=fails, latency=latency)
    owner = {}
    for group in res.groups:
        assert len(group) <= 8
        for q in group:
            assert q not in owner
            owner[q] = group
    for pid, state in res.states.items():
        if state.phase is Phase.FAILED:
            continue
        # consensus: every alive peer is sealed with the leader's exact list
        assert state.phase is Phase.GROUP_SEALED
        assert tuple(state.members) == owner[pid]
    assert res.finished_at <= timeout_budget(n, 3.0, latency, 3.0)


def test_guarantees_under_random_fail_stop_schedules():
    gen = np.random.default_rng(2024)
    for _ in range(10_000):
        _check_schedule(int(gen.integers(1, 9)), gen)


def test_maximality_without_failures():
    gen = np.random.default_rng(99)
    for _ in range(2000):
        n = int(gen.integers(1, 9))
        ts = {i: float(gen.random()) for i in range(n)}
        res = _match(n, timestamps=ts)
        assert len(res.groups) == 1 and sorted(res.groups[0]) == list(range(n))
        assert res.groups[0][0] == min(ts, key=lambda q: (ts[q], q))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_event_driven_matches_ideal_without_failures(M, d, seed):
    grid = GridConfig(M, d)
    gen = np.random.default_rng(seed)
    cells = gen.permutation(grid.capacity)[: int(gen.integers(1, grid.capacity + 1))]
    keys = {int(i): initial_index(int(c), grid) for i, c in enumerate(cells)}
    ts = {pid: float(gen.random()) for pid in keys}
    res = form_groups(0, keys, SimulatedDHT(ttl=1000.0), M, timestamps=ts)
    assert sorted(res.groups) == sorted(ideal_groups(keys, M, ts))


@pytest.mark.parametrize("M,d", [(M, d) for M in (2, 3, 4) for d in (2, 3)])
def test_no_pair_repeats_in_consecutive_rounds(M, d):
    grid = GridConfig(M, d)
    keys = {i: initial_index(i, grid) for i in range(grid.capacity)}
    previous = None
    for _ in range(2 * d):
        groups = ideal_groups(keys, M)
        pairs = {frozenset(p) for g in groups for p in itertools.combinations(g, 2)}
        if previous is not None:
            assert not pairs & previous
        previous = pairs
        ranks = chunk_ranks(groups)
        keys = {pid: next_group_key(key, ranks[pid], M) for pid, key in keys.items()}
