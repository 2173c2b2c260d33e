"""Group keys and leader-based group formation over the simulated DHT.

Peers sharing a group key find each other through the DHT and then assemble
groups with join requests: a peer asks the lowest-priority peer it knows of to
accept it, the accepting peer becomes (or stays) leader, and the leader
eventually seals the group and sends every follower the same member list.
Leaders that are accepted elsewhere redirect their followers; followers
whose leader dies restart around the next candidate.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .core import GridConfig
from .dht import DhtKey, SimulatedDHT


@dataclass(frozen=True, order=True)
class Priority:
    """``(timestamp, peer)``; earlier local start wins, peer id breaks ties."""

    timestamp: float
    peer: int


class Phase(Enum):
    DECLARED = "Declared"
    LEADER_COLLECTING = "LeaderCollecting"
    FOLLOWER_COMMITTED = "FollowerCommitted"
    GROUP_SEALED = "GroupSealed"
    RUNNING_ALLREDUCE = "RunningAllReduce"
    FAILED = "Failed"


@dataclass
class MatchState:
    phase: Phase = Phase.DECLARED
    leader: int | None = None
    members: list[int] = field(default_factory=list)


def initial_index(i: int, grid: GridConfig) -> tuple[int, ...]:
    """Base-``M`` digits 1..d-1 of cell ``i``; at most ``M`` cells share a key."""
    if not 0 <= i < grid.capacity:
        raise ValueError(f"cell {i} outside grid of capacity {grid.capacity}")
    return tuple((i // grid.M**j) % grid.M for j in range(1, grid.d))


def next_group_key(prev: tuple[int, ...], new_chunk: int, M: int) -> tuple[int, ...]:
    """Drop the oldest chunk index and append ``new_chunk``."""
    if not 0 <= new_chunk < M:
        raise ValueError(f"chunk index {new_chunk} outside [0, {M})")
    if not prev:
        return ()
    return tuple(prev[1:]) + (new_chunk,)


def encode_key(key: tuple[int, ...], M: int) -> int:
    code = 0
    for digit in key:
        code = code * M + digit
    return code


def decode_key(code: int, M: int, length: int) -> tuple[int, ...]:
    digits = []
    for _ in range(length):
        code, digit = divmod(code, M)
        digits.append(digit)
    return tuple(reversed(digits))


@dataclass
class MatchResult:
    groups: list[tuple[int, ...]]
    states: dict[int, MatchState]
    finished_at: float
    events: int
    trace: list[tuple] = field(default_factory=list)

    def group_of(self, peer: int) -> tuple[int, ...] | None:
        for group in self.groups:
            if peer in group:
                return group
        return None


@dataclass
class _Peer:
    pid: int
    key: tuple[int, ...]
    priority: Priority
    start: float
    state: MatchState = field(default_factory=MatchState)
    alive: bool = True
    pending: int | None = None
    request_seq: int = 0
    dead: set = field(default_factory=set)
    rejected_by: set = field(default_factory=set)
    last_join: float = 0.0
    seal_at: float | None = None


def form_groups(
    round_t: int,
    keys: Mapping[int, tuple[int, ...]],
    dht: SimulatedDHT,
    group_size: int,
    *,
    timestamps: Mapping[int, float] | None = None,
    starts: Mapping[int, float] | None = None,
    fail_times: Mapping[int, float] | None = None,
    latency: float = 0.0,
    timeout: float = 3.0,
    t0: float = 0.0,
    record_trace: bool = False,
) -> MatchResult:
    """Run matchmaking for one round and return the sealed groups.

    ``keys`` maps every participating peer to its group key. ``timestamps``
    are the peers' local clocks at start (default ``starts``), ``starts`` the
    true start times (default ``t0``), and ``fail_times`` schedules fail-stop
    events. Every message takes ``latency`` ticks; an unanswered request is
    abandoned after ``timeout`` ticks and a leader seals ``timeout`` ticks
    after its last accepted join.
    """
    if not 0.0 <= 2.0 * latency < timeout:
        raise ValueError("need 0 <= 2 * latency < timeout so that replies beat the timeout")
    starts = dict(starts or {})
    timestamps = dict(timestamps or {})
    fail_times = dict(fail_times or {})
    peers: dict[int, _Peer] = {}
    for pid, key in keys.items():
        start = starts.get(pid, t0)
        peers[pid] = _Peer(pid, tuple(key), Priority(timestamps.get(pid, start), pid), start)

    queue: list = []
    counter = itertools.count()
    trace: list[tuple] = []

    def push(time, kind, *args):
        heapq.heappush(queue, (time, next(counter), kind, args))

    for pid in sorted(peers, key=lambda q: (peers[q].start, q)):
        push(peers[pid].start, "start", pid)
    for pid, when in fail_times.items():
        if pid in peers:
            push(when, "fail", pid)

    def dht_key(peer: _Peer) -> DhtKey:
        return DhtKey(peer.key, round_t)

    def seek(peer: _Peer, now: float, preferred: int | None = None) -> None:
        """Request to join the best known lower-priority peer, or lead."""
        if preferred is not None and preferred not in peer.dead:
            target = preferred
        else:
            listed = dht.get(dht_key(peer), now)
            candidates = [
                peers[q]
                for q in listed
                if q in peers
                and q != peer.pid
                and q not in peer.dead
                and q not in peer.rejected_by
                and peers[q].priority < peer.priority
            ]
            target = min(candidates, key=lambda c: c.priority).pid if candidates else None
        if target is None:
            peer.pending = None
            if peer.state.phase is Phase.DECLARED:
                peer.state = MatchState(Phase.LEADER_COLLECTING, peer.pid, [peer.pid])
            # open a fresh join window now that this peer leads for sure
            peer.last_join = now
            schedule_seal(peer, now)
            return
        if peer.state.phase is Phase.DECLARED:
            peer.state = MatchState(Phase.LEADER_COLLECTING, peer.pid, [peer.pid])
            peer.last_join = now
        peer.pending = target
        peer.request_seq += 1
        push(now + latency, "join_req", peer.pid, target, peer.request_seq)
        push(now + timeout, "join_timeout", peer.pid, target, peer.request_seq)

    def schedule_seal(peer: _Peer, now: float) -> None:
        when = max(now, peer.last_join + timeout)
        if peer.seal_at is None or peer.seal_at != when:
            peer.seal_at = when
            push(when, "seal", peer.pid, when)

    def accepting(leader: _Peer) -> bool:
        return (
            leader.alive
            and leader.state.phase is Phase.LEADER_COLLECTING
            and len(leader.state.members) < group_size
        )

    sealed_groups: list[tuple[int, ...]] = []
    events = 0
    finished_at = t0
    while queue:
        now, _, kind, args = heapq.heappop(queue)
        events += 1
        if record_trace:
            trace.append((now, kind) + tuple(args))

        if kind == "start":
            peer = peers[args[0]]
            if not peer.alive:
                continue
            dht.declare(dht_key(peer), peer.pid, now)
            push(now, "lookup", peer.pid)

        elif kind == "lookup":
            peer = peers[args[0]]
            if peer.alive and peer.state.phase is Phase.DECLARED and peer.pending is None:
                seek(peer, now)

        elif kind == "fail":
            peer = peers[args[0]]
            if not peer.alive:
                continue
            peer.alive = False
            dht.mark_failed(peer.pid)
            was_leading = peer.state.phase is Phase.LEADER_COLLECTING
            peer.state = MatchState(Phase.FAILED, peer.state.leader, list(peer.state.members))
            if was_leading:
                for follower in peer.state.members:
                    if follower != peer.pid:
                        push(now + timeout, "leader_lost", follower, peer.pid)

        elif kind == "join_req":
            pid, target, seq = args
            requester, leader = peers[pid], peers[target]
            if not leader.alive:
                continue  # requester times out
            if accepting(leader) and requester.pid not in leader.state.members:
                leader.state.members.append(requester.pid)
                leader.state.members.sort(key=lambda q: peers[q].priority)
                leader.last_join = now
                if leader.pending is None:
                    schedule_seal(leader, now)
                push(now + latency, "join_ok", pid, target, seq)
            else:
                push(now + latency, "join_reject", pid, target, seq)

        elif kind == "join_ok":
            pid, target, seq = args
            peer = peers[pid]
            if not peer.alive:
                continue
            if peer.pending != target or peer.request_seq != seq:
                push(now + latency, "leave", pid, target)
                continue
            followers = [q for q in peer.state.members if q != pid]
            peer.pending = None
            peer.seal_at = None
            peer.state = MatchState(Phase.FOLLOWER_COMMITTED, target, [])
            for follower in followers:
                push(now + latency, "redirect", follower, pid, target)

        elif kind == "join_reject":
            pid, target, seq = args
            peer = peers[pid]
            if not peer.alive or peer.pending != target or peer.request_seq != seq:
                continue
            peer.rejected_by.add(target)
            peer.pending = None
            seek(peer, now)

        elif kind == "join_timeout":
            pid, target, seq = args
            peer = peers[pid]
            if not peer.alive or peer.pending != target or peer.request_seq != seq:
                continue
            peer.dead.add(target)
            peer.pending = None
            seek(peer, now)

        elif kind == "leave":
            pid, target = args
            leader = peers[target]
            if leader.alive and leader.state.phase is Phase.LEADER_COLLECTING:
                if pid in leader.state.members:
                    leader.state.members.remove(pid)

        elif kind == "redirect":
            pid, old_leader, new_leader = args
            peer = peers[pid]
            if not peer.alive or peer.state.phase is not Phase.FOLLOWER_COMMITTED:
                continue
            if peer.state.leader != old_leader:
                continue
            peer.state = MatchState(Phase.DECLARED)
            seek(peer, now, preferred=new_leader)

        elif kind == "leader_lost":
            pid, leader = args
            peer = peers[pid]
            if not peer.alive or peer.state.phase is not Phase.FOLLOWER_COMMITTED:
                continue
            if peer.state.leader != leader:
                continue
            peer.dead.add(leader)
            peer.state = MatchState(Phase.DECLARED)
            seek(peer, now)

        elif kind == "seal":
            pid, when = args
            leader = peers[pid]
            if not leader.alive or leader.state.phase is not Phase.LEADER_COLLECTING:
                continue
            if leader.seal_at != when or leader.pending is not None:
                continue
            if now < leader.last_join + timeout and len(leader.state.members) < group_size:
                schedule_seal(leader, now)
                continue
            # last look for an earlier leader before committing
            listed = dht.get(dht_key(leader), now)
            better = [
                q
                for q in listed
                if q in peers
                and q not in leader.dead
                and q not in leader.rejected_by
                and peers[q].priority < leader.priority
            ]
            if better:
                seek(leader, now)
                continue
            members = [q for q in leader.state.members if peers[q].alive]
            members.sort(key=lambda q: peers[q].priority)
            leader.state = MatchState(Phase.GROUP_SEALED, pid, list(members))
            sealed_groups.append(tuple(members))
            finished_at = max(finished_at, now)
            for follower in members:
                if follower != pid:
                    push(now + latency, "sealed", follower, pid, tuple(members))

        elif kind == "sealed":
            pid, leader, members = args
            peer = peers[pid]
            if not peer.alive:
                continue
            if peer.state.phase is not Phase.FOLLOWER_COMMITTED or peer.state.leader != leader:
                continue
            peer.state = MatchState(Phase.GROUP_SEALED, leader, list(members))
            finished_at = max(finished_at, now)

    groups = sorted(sealed_groups, key=lambda g: peers[g[0]].priority)
    states = {pid: peer.state for pid, peer in peers.items()}
    return MatchResult(groups, states, finished_at, events, trace)


def ideal_groups(
    keys: Mapping[int, tuple[int, ...]],
    group_size: int,
    timestamps: Mapping[int, float] | None = None,
) -> list[tuple[int, ...]]:
    """Groups formed when nobody fails and every message is instant.

    Each cohort of equal keys is split, in priority order, into blocks of at
    most ``group_size`` peers.
    """
    timestamps = timestamps or {}
    cohorts: dict[tuple[int, ...], list[int]] = {}
    for pid, key in keys.items():
        cohorts.setdefault(tuple(key), []).append(pid)
    groups = []
    for members in cohorts.values():
        members.sort(key=lambda q: Priority(timestamps.get(q, 0.0), q))
        for lo in range(0, len(members), group_size):
            groups.append(tuple(members[lo : lo + group_size]))
    groups.sort(key=lambda g: Priority(timestamps.get(g[0], 0.0), g[0]))
    return groups


def timeout_budget(n_peers: int, timeout: float, latency: float = 0.0, start_spread: float = 0.0) -> float:
    """Upper bound on matchmaking duration used by the progress checks.

    Each failed candidate costs a peer at most one timeout plus a round trip,
    and sealing needs one more quiet period.
    """
    per_step = timeout + 2.0 * latency + 1.0
    return start_spread + (n_peers + 2) * per_step * 2.0


def group_peers(groups: Iterable[tuple[int, ...]]) -> dict[int, tuple[int, ...]]:
    return {pid: group for group in groups for pid in group}


def chunk_ranks(groups: Iterable[tuple[int, ...]]) -> dict[int, int]:
    """Chunk index of each peer: its rank in the sealed member ordering."""
    return {pid: rank for group in groups for rank, pid in enumerate(group)}


def random_timestamps(gen: np.random.Generator, peers: Iterable[int], skew: float) -> dict[int, float]:
    """Local clocks with uniform skew in ``[0, skew)``; zero skew gives zeros."""
    peers = list(peers)
    if skew <= 0:
        return {pid: 0.0 for pid in peers}
    return {pid: float(v) for pid, v in zip(peers, gen.random(len(peers)) * skew)}
