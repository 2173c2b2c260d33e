import pytest

from moshpit_lab.dht import DhtKey, SimulatedDHT, lookup_cost


def test_read_your_write():
    dht = SimulatedDHT()
    key = DhtKey((0,), 1)
    assert dht.declare(key, 3, now=0.0)
    assert dht.get(key, now=0.5) == [3]


def test_deterministic_order():
    dht = SimulatedDHT()
    key = DhtKey((1, 2), 4)
    dht.declare(key, 9, now=1.0)
    dht.declare(key, 2, now=1.0)
    dht.declare(key, 5, now=0.5)
    assert dht.get(key, now=1.0) == [5, 2, 9]


def test_expiration():
    dht = SimulatedDHT(ttl=2.0)
    key = DhtKey((0,), 0)
    dht.declare(key, 1, now=0.0)
    assert dht.get(key, now=2.0) == [1]
    assert dht.get(key, now=3.0) == []


def test_unknown_key_and_round_distinct():
    dht = SimulatedDHT()
    dht.declare(DhtKey((0,), 1), 1, now=0.0)
    assert dht.get(DhtKey((0,), 2), now=0.0) == []
    assert DhtKey((0,), 1) != DhtKey((0,), 2)
    assert DhtKey((0,), 1) == DhtKey((0,), 1)


def test_failed_peer_listed_but_unreachable():
    dht = SimulatedDHT()
    key = DhtKey((), 0)
    for peer in range(5):
        dht.declare(key, peer, now=0.0)
    dht.mark_failed(2)
    assert len(dht.get(key, now=0.0)) == 5
    assert dht.get_reachable(key, now=0.0) == [0, 1, 3, 4]


def test_failed_peer_declare_is_noop():
    dht = SimulatedDHT()
    dht.mark_failed(1)
    assert not dht.declare(DhtKey((), 0), 1, now=0.0)
    assert dht.get(DhtKey((), 0), now=0.0) == []
    dht.mark_alive(1)
    assert dht.declare(DhtKey((), 0), 1, now=0.0)


def test_request_counting():
    dht = SimulatedDHT(n_nodes=1024)
    dht.declare(DhtKey((), 0), 0, now=0.0)
    dht.get(DhtKey((), 0), now=0.0)
    assert dht.requests == 22


@pytest.mark.parametrize("n,k,expected", [(1, 1, 1), (1, 3, 3), (1024, 1, 11), (1025, 1, 12)])
def test_lookup_cost(n, k, expected):
    assert lookup_cost(n, k) == expected


def test_lookup_cost_rejects_empty():
    with pytest.raises(ValueError):
        lookup_cost(0)
