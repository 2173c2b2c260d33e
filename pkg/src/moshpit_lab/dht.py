"""In-process stand-in for the rendezvous DHT used by matchmaking.

Only the key -> multi-value semantics and a request-count cost model are
simulated; there is no routing table.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass


@dataclass(frozen=True, order=True)
class DhtKey:
    group_key: tuple[int, ...]
    round: int


@dataclass(frozen=True)
class DhtEntry:
    peer: int
    declared_at: float
    expiration: float


class SimulatedDHT:
    """Centralized map with deterministic ordering and entry expiration.

    ``ttl`` is measured in the caller's logical time units. Peers marked as
    failed can no longer declare, but entries they made earlier stay visible
    until they expire.
    """

    def __init__(self, ttl: float = 2.0, n_nodes: int = 1, replication: int = 1):
        self.ttl = ttl
        self.n_nodes = n_nodes
        self.replication = replication
        self._store: dict[DhtKey, dict[int, DhtEntry]] = defaultdict(dict)
        self._failed: set[int] = set()
        self.requests = 0

    def mark_failed(self, peer: int) -> None:
        self._failed.add(peer)

    def mark_alive(self, peer: int) -> None:
        self._failed.discard(peer)

    def is_alive(self, peer: int) -> bool:
        return peer not in self._failed

    def declare(self, key: DhtKey, peer: int, now: float) -> bool:
        """Store ``peer`` under ``key``; a failed peer's declare is a no-op."""
        self.requests += lookup_cost(self.n_nodes, self.replication)
        if peer in self._failed:
            return False
        self._store[key][peer] = DhtEntry(peer, now, now + self.ttl)
        return True

    def entries(self, key: DhtKey, now: float) -> list[DhtEntry]:
        live = [e for e in self._store.get(key, {}).values() if now <= e.expiration]
        live.sort(key=lambda e: (e.declared_at, e.peer))
        return live

    def get(self, key: DhtKey, now: float) -> list[int]:
        self.requests += lookup_cost(self.n_nodes, self.replication)
        return [e.peer for e in self.entries(key, now)]

    def get_reachable(self, key: DhtKey, now: float) -> list[int]:
        return [peer for peer in self.get(key, now) if peer not in self._failed]


def lookup_cost(n_peers: int, k: int = 1) -> int:
    """Request count of one DHT read or write among ``n_peers`` nodes."""
    if n_peers < 1:
        raise ValueError("n_peers must be >= 1")
    return math.ceil(math.log2(n_peers)) + k
