"""Multi-round averaging protocols under one trial driver.

All drivers take initial peer values (or a peer count, in which case values
are drawn from the ``"init"`` stream), run until the round cap, and return a
:class:`TrialReport` measured against the frozen initial mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .allreduce import cohort_ranks, grouped_allreduce
from .core import FailureModel, GridConfig, Rng, as_params, distortion, mean_drift, pairwise_sum
from .dht import SimulatedDHT, lookup_cost
from .matchmaking import chunk_ranks, form_groups
from .theory import complexity_estimate

DEFAULT_THRESHOLDS = (1e-9, 1e-4)
DEFAULT_CAP = 50


class ProtocolKind(str, Enum):
    MOSHPIT = "moshpit"
    RANDOM_GROUPS = "random_groups"
    GOSSIP = "gossip"
    PUSHSUM = "pushsum"
    ALLREDUCE_RESTART = "allreduce_restart"


@dataclass
class TrialReport:
    protocol: str
    N: int
    initial_distortion: float
    distortion: list[float] = field(default_factory=list)
    active_counts: list[int] = field(default_factory=list)
    drift: list[float] = field(default_factory=list)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    cap: int = DEFAULT_CAP
    cost_units: float = 0.0
    dht_requests: int = 0
    final_values: np.ndarray | None = field(default=None, repr=False)
    final_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def rounds(self) -> int:
        return len(self.distortion)

    def rounds_to(self, threshold: float) -> int:
        """First round whose distortion is at most ``threshold``, capped."""
        for t, value in enumerate(self.distortion, start=1):
            if value <= threshold:
                return min(t, self.cap)
        return self.cap

    @property
    def rounds_to_map(self) -> dict[float, int]:
        return {thr: self.rounds_to(thr) for thr in self.thresholds}


class _Tracker:
    """Records per-round metrics and decides when a trial may stop."""

    def __init__(self, kind: ProtocolKind, values: np.ndarray, thresholds, cap: int, stop_early: bool):
        self.values0 = values.copy()
        self.ref = pairwise_sum(values) / values.shape[0]
        self.report = TrialReport(
            protocol=kind.value,
            N=values.shape[0],
            initial_distortion=distortion(values, self.ref),
            thresholds=tuple(thresholds),
            cap=cap,
        )
        self.stop_below = min(thresholds) if (stop_early and thresholds) else None

    def record(self, values: np.ndarray, active: int, conserved: np.ndarray | None = None) -> bool:
        """Store one round; True when the caller may stop early.

        ``conserved`` is the per-peer quantity whose mean the protocol keeps
        fixed, when that differs from the reported values (push-sum mass).
        """
        dist = distortion(values, self.ref)
        self.report.distortion.append(dist)
        self.report.active_counts.append(int(active))
        self.report.drift.append(mean_drift(self.values0, values if conserved is None else conserved))
        return self.stop_below is not None and dist <= self.stop_below

    def finish(self, values: np.ndarray, cost: float, dht_requests: int = 0) -> TrialReport:
        self.report.cost_units = cost
        self.report.dht_requests = dht_requests
        self.report.final_values = values
        return self.report


def _initial_values(peers, rng: Rng) -> np.ndarray:
    if isinstance(peers, (int, np.integer)):
        if peers < 1:
            raise ValueError("need at least one peer")
        return rng.stream("init").standard_normal((int(peers), 1))
    values = as_params(peers)
    if values.shape[0] < 1:
        raise ValueError("need at least one peer")
    return values.copy()


def place_peers(N: int, grid: GridConfig, rng: Rng) -> np.ndarray:
    """Random distinct grid cells for ``N`` peers (all cells when the grid is full)."""
    grid.check_fits(N)
    return rng.stream("placement").permutation(grid.capacity)[:N]


def initial_key_codes(cells: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Integer encoding of ``initial_index``; the oldest index is most significant."""
    M, d = grid.M, grid.d
    codes = np.zeros(len(cells), dtype=np.int64)
    for j in range(1, d):
        codes = codes * M + (cells // M**j) % M
    return codes


def advance_key_codes(codes: np.ndarray, chunks: np.ndarray, grid: GridConfig) -> np.ndarray:
    if grid.d == 1:
        return codes
    return (codes % grid.M ** (grid.d - 2)) * grid.M + chunks


def moshpit_rounds(
    values: np.ndarray,
    grid: GridConfig,
    rounds: int,
    rng: Rng,
    failure: FailureModel = FailureModel(),
    *,
    key_codes: np.ndarray | None = None,
    priority: np.ndarray | None = None,
    on_round=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run Moshpit rounds with ideal matchmaking; returns ``(values, key_codes)``.

    Groups are cohorts of equal key, ordered by ``priority``; a peer failing
    during a round voids its group's averaging for that round. ``on_round`` is
    called with ``(values, n_alive)`` after each round and may return True to
    stop.
    """
    values = values.copy()
    N = values.shape[0]
    if key_codes is None:
        key_codes = initial_key_codes(place_peers(N, grid, rng), grid)
    if priority is None:
        priority = np.arange(N)
    fail_gen = rng.stream("failures")
    for _ in range(rounds):
        failed = failure.sample(fail_gen, N)
        labels = key_codes
        ranks = cohort_ranks(key_codes, priority)
        if ranks.max(initial=0) >= grid.M:
            # oversized cohorts (possible under churn) split into blocks of M
            labels = key_codes * N + ranks // grid.M
        values, ranks, _ = grouped_allreduce(values, labels, priority, failed)
        key_codes = advance_key_codes(key_codes, ranks, grid)
        if on_round is not None and on_round(values, N - int(failed.sum())):
            break
    return values, key_codes


def _moshpit_simulated_round(values, key_codes, timestamps, grid, round_t, failed, gen, timeout, latency):
    """One round with the event-driven matchmaker; failures strike at random times."""
    N = values.shape[0]
    key_len = max(grid.d - 1, 0)
    keys = {}
    for pid in range(N):
        code, digits = int(key_codes[pid]), []
        for _ in range(key_len):
            code, digit = divmod(code, grid.M)
            digits.append(digit)
        keys[pid] = tuple(reversed(digits))
    fail_at = {int(pid): float(gen.random() * 2.0 * timeout) for pid in np.flatnonzero(failed)}
    dht = SimulatedDHT(ttl=1e9, n_nodes=N)
    result = form_groups(
        round_t, keys, dht, grid.M, timestamps=timestamps, fail_times=fail_at, latency=latency, timeout=timeout
    )
    out = values.copy()
    ranks = chunk_ranks(result.groups)
    for group in result.groups:
        members = list(group)
        # members that died after sealing void the all-reduce
        dead = [q for q in members if q in fail_at]
        if not dead:
            out[members] = pairwise_sum(values[members]) / len(members)
    # peers left out of every sealed group take their rank within the cohort
    new_chunks = np.zeros(N, dtype=np.int64)
    by_key: dict[tuple, list[int]] = {}
    for pid in range(N):
        by_key.setdefault(keys[pid], []).append(pid)
    for cohort in by_key.values():
        cohort.sort(key=lambda q: (timestamps.get(q, 0.0), q))
        for rank, pid in enumerate(cohort):
            new_chunks[pid] = ranks.get(pid, rank % grid.M)
    return out, advance_key_codes(key_codes, new_chunks, grid), dht.requests


def run_moshpit(
    grid: GridConfig,
    peers,
    failure: FailureModel = FailureModel(),
    rng: Rng | None = None,
    *,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = False,
    matchmaking: str = "ideal",
    skew: float = 0.0,
    latency: float = 0.0,
    timeout: float = 3.0,
) -> TrialReport:
    """Moshpit All-Reduce for ``grid.T`` rounds over randomly placed peers."""
    rng = rng or Rng(0)
    values = _initial_values(peers, rng)
    N, s = values.shape
    grid.check_fits(N)
    tracker = _Tracker(ProtocolKind.MOSHPIT, values, thresholds, grid.T, stop_early)
    key_codes = initial_key_codes(place_peers(N, grid, rng), grid)
    clock = rng.stream("priorities")
    offsets = clock.random(N) * skew if skew > 0 else np.zeros(N)
    priority = np.lexsort((np.arange(N), offsets))
    rank_of = np.empty(N, dtype=np.int64)
    rank_of[priority] = np.arange(N)
    per_round_requests = 2 * N * lookup_cost(N)

    if matchmaking == "ideal":
        values, _ = moshpit_rounds(
            values, grid, grid.T, rng, failure, key_codes=key_codes, priority=rank_of, on_round=tracker.record
        )
        requests = per_round_requests * tracker.report.rounds
    elif matchmaking == "simulated":
        timestamps = {pid: float(offsets[pid]) for pid in range(N)}
        fail_gen = rng.stream("failures")
        fail_time_gen = rng.stream("failure_times")
        requests = 0
        for t in range(grid.T):
            failed = failure.sample(fail_gen, N)
            values, key_codes, used = _moshpit_simulated_round(
                values, key_codes, timestamps, grid, t + 1, failed, fail_time_gen, timeout, latency
            )
            requests += used
            if tracker.record(values, N - int(failed.sum())):
                break
    else:
        raise ValueError(f"unknown matchmaking mode {matchmaking!r}")
    cost = complexity_estimate(tracker.report.rounds, N, grid.M, s)
    return tracker.finish(values, cost, requests)


def run_random_groups(
    N,
    group_size: int,
    rounds: int,
    failure: FailureModel = FailureModel(),
    rng: Rng | None = None,
    *,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = False,
) -> TrialReport:
    """Each round, alive peers are shuffled into ``ceil(n/M)`` near-equal groups."""
    rng = rng or Rng(0)
    values = _initial_values(N, rng)
    n, s = values.shape
    tracker = _Tracker(ProtocolKind.RANDOM_GROUPS, values, thresholds, rounds, stop_early)
    split_gen = rng.stream("splits")
    fail_gen = rng.stream("failures")
    for _ in range(rounds):
        failed = failure.sample(fail_gen, n)
        alive = np.flatnonzero(~failed)
        if alive.size:
            r = math.ceil(alive.size / group_size)
            shuffled = split_gen.permutation(alive)
            labels = np.arange(alive.size) % r
            sub = values[shuffled]
            new, _, _ = grouped_allreduce(sub, labels, np.arange(alive.size))
            values[shuffled] = new
        if tracker.record(values, alive.size):
            break
    cost = complexity_estimate(tracker.report.rounds, n, group_size, s)
    return tracker.finish(values, cost)


def run_gossip(
    N,
    rounds: int,
    failure: FailureModel = FailureModel(),
    rng: Rng | None = None,
    *,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = False,
) -> TrialReport:
    """Synchronous ring gossip with uniform 1/3 weights on live edges."""
    rng = rng or Rng(0)
    values = _initial_values(N, rng)
    n, s = values.shape
    if n < 3:
        raise ValueError("ring gossip needs N >= 3")
    tracker = _Tracker(ProtocolKind.GOSSIP, values, thresholds, rounds, stop_early)
    fail_gen = rng.stream("failures")
    for _ in range(rounds):
        alive = ~failure.sample(fail_gen, n)
        # edge (i, i+1) is live when both endpoints are
        edge = (alive & np.roll(alive, -1)).astype(np.float64)[:, None]
        right = np.roll(values, -1, axis=0) - values
        flow = edge * right / 3.0
        values = values + flow - np.roll(flow, 1, axis=0)
        if tracker.record(values, int(alive.sum())):
            break
    cost = float(tracker.report.rounds * 2 * s)
    return tracker.finish(values, cost)


def run_pushsum(
    N,
    rounds: int,
    failure: FailureModel = FailureModel(),
    rng: Rng | None = None,
    *,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = False,
    schedule: str = "exponential",
) -> TrialReport:
    """Push-sum over (value, weight) pairs.

    With ``schedule="exponential"`` peer ``i`` pushes half its mass to
    ``i + 2**(t mod ceil(log2 N))``; ``"random"`` picks a uniform random other
    peer every round. A push only happens when sender and receiver are alive.
    """
    rng = rng or Rng(0)
    values = _initial_values(N, rng)
    n, s = values.shape
    if n < 2:
        raise ValueError("push-sum needs N >= 2")
    tracker = _Tracker(ProtocolKind.PUSHSUM, values, thresholds, rounds, stop_early)
    fail_gen = rng.stream("failures")
    target_gen = rng.stream("targets")
    period = max(1, math.ceil(math.log2(n)))
    mass = values.copy()
    weight = np.ones(n)
    ids = np.arange(n)
    for t in range(rounds):
        alive = ~failure.sample(fail_gen, n)
        if schedule == "exponential":
            target = (ids + 2 ** (t % period)) % n
        elif schedule == "random":
            target = target_gen.integers(0, n - 1, n)
            target = target + (target >= ids)
        else:
            raise ValueError(f"unknown push-sum schedule {schedule!r}")
        sends = alive & alive[target]
        share = np.where(sends, 0.5, 0.0)
        out_mass = mass * share[:, None]
        out_weight = weight * share
        mass = mass - out_mass
        weight = weight - out_weight
        np.add.at(mass, target, out_mass)
        np.add.at(weight, target, out_weight)
        estimate = mass / weight[:, None]
        if tracker.record(estimate, int(alive.sum()), conserved=mass):
            break
    tracker.report.final_weights = weight
    cost = float(tracker.report.rounds * s)
    return tracker.finish(mass / weight[:, None], cost)


def run_allreduce_restart(
    N,
    rounds: int,
    failure: FailureModel = FailureModel(),
    rng: Rng | None = None,
    *,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = False,
) -> TrialReport:
    """Global All-Reduce retried every round until no peer fails during it."""
    rng = rng or Rng(0)
    values = _initial_values(N, rng)
    n, s = values.shape
    tracker = _Tracker(ProtocolKind.ALLREDUCE_RESTART, values, thresholds, rounds, stop_early)
    fail_gen = rng.stream("failures")
    done = False
    for _ in range(rounds):
        failed = failure.sample(fail_gen, n) if not done else np.zeros(n, dtype=bool)
        if not done and not failed.any():
            values = np.tile(pairwise_sum(values) / n, (n, 1))
            done = True
        if tracker.record(values, n - int(failed.sum())):
            break
    cost = complexity_estimate(tracker.report.rounds, n, n, s) if n > 1 else 0.0
    return tracker.finish(values, cost)


def run_protocol(
    kind,
    N: int,
    grid: GridConfig,
    failure: FailureModel,
    rng: Rng,
    *,
    cap: int = DEFAULT_CAP,
    thresholds=DEFAULT_THRESHOLDS,
    stop_early: bool = True,
    **options,
) -> TrialReport:
    kind = ProtocolKind(kind)
    common = dict(thresholds=thresholds, stop_early=stop_early)
    if kind is ProtocolKind.MOSHPIT:
        return run_moshpit(GridConfig(grid.M, grid.d, cap), N, failure, rng, **common, **options)
    if kind is ProtocolKind.RANDOM_GROUPS:
        return run_random_groups(N, grid.M, cap, failure, rng, **common)
    if kind is ProtocolKind.GOSSIP:
        return run_gossip(N, cap, failure, rng, **common)
    if kind is ProtocolKind.PUSHSUM:
        return run_pushsum(N, cap, failure, rng, **common, **options)
    return run_allreduce_restart(N, cap, failure, rng, **common)
