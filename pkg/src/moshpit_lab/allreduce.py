"""Butterfly All-Reduce inside one group, and bandwidth-aware chunk sizing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_params, pairwise_sum, segment_means


@dataclass(frozen=True)
class PartitionWeights:
    w: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if not w or any(x < 0 for x in w):
            raise ValueError(f"weights must be non-negative, got {self.w!r}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(w)}")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, n: int) -> "PartitionWeights":
        return cls(tuple([1.0 / n] * n))


@dataclass(frozen=True)
class BandwidthProfile:
    b: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        if not b:
            raise ValueError("bandwidth profile is empty")
        if any(not x > 0 for x in b):
            raise ValueError(f"bandwidths must be positive, got {self.b!r}")
        object.__setattr__(self, "b", b)


@dataclass
class AllReduceResult:
    outputs: np.ndarray
    chunks: list[int]
    bounds: list[tuple[int, int]]
    completed: bool


def chunk_sizes(weights: PartitionWeights, s: int) -> list[int]:
    """Split ``s`` coordinates proportionally to ``weights`` (largest remainder)."""
    raw = [w * s for w in weights.w]
    sizes = [math.floor(x) for x in raw]
    leftover = s - sum(sizes)
    by_remainder = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in by_remainder[:leftover]:
        sizes[k] += 1
    return sizes


def chunk_bounds(weights: PartitionWeights, s: int) -> list[tuple[int, int]]:
    bounds, lo = [], 0
    for size in chunk_sizes(weights, s):
        bounds.append((lo, lo + size))
        lo += size
    return bounds


def butterfly_allreduce(vectors, weights: PartitionWeights | None = None, failed=None) -> AllReduceResult:
    """Average one sealed group's vectors; member ``k`` reduces chunk ``k``.

    ``failed`` marks members that drop out mid-round; any failure voids the
    round for the whole group, which keeps its inputs. Chunk indices are the
    member ranks either way.
    """
    values = as_params(vectors)
    n, s = values.shape
    if weights is None:
        weights = PartitionWeights.uniform(n)
    if len(weights.w) != n:
        raise ValueError(f"{len(weights.w)} weights for a group of {n}")
    bounds = chunk_bounds(weights, s)
    ranks = list(range(n))
    if failed is not None and np.any(failed):
        return AllReduceResult(values.copy(), ranks, bounds, False)
    reduced = np.empty(s)
    for lo, hi in bounds:
        if hi > lo:
            reduced[lo:hi] = pairwise_sum(values[:, lo:hi]) / n
    return AllReduceResult(np.tile(reduced, (n, 1)), ranks, bounds, True)


def cohort_ranks(labels: np.ndarray, priority: np.ndarray) -> np.ndarray:
    """Rank of every peer among those sharing its label, ordered by ``priority``."""
    n = len(labels)
    order = np.lexsort((priority, labels))
    sorted_labels = labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_labels[1:] != sorted_labels[:-1]])
    counts = np.diff(np.r_[starts, n])
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n) - np.repeat(starts, counts)
    return ranks


def grouped_allreduce(values: np.ndarray, labels: np.ndarray, priority: np.ndarray, failed: np.ndarray | None = None):
    """Run every group of one round at once.

    Peers sharing a label form a group ordered by ``priority``; the chunk
    index of a peer is its rank in that order. Groups containing a failed peer
    keep their inputs. Returns ``(new_values, ranks, completed_mask)``.
    """
    values = as_params(values)
    ranks = cohort_ranks(labels, priority)
    means, inverse, _ = segment_means(values, labels)
    ok = np.ones(values.shape[0], dtype=bool)
    if failed is not None and np.any(failed):
        bad_groups = np.unique(inverse[failed])
        ok = ~np.isin(inverse, bad_groups)
    out = values.copy()
    out[ok] = means[inverse[ok]]
    return out, ranks, ok


def transfer_times(weights: PartitionWeights, profile: BandwidthProfile) -> list[float]:
    """Per-peer communication time ``(1 - w + (M-1) w) / b``."""
    M = len(profile.b)
    return [(1.0 - w + (M - 1) * w) / b for w, b in zip(weights.w, profile.b)]


def balance_partition(profile: BandwidthProfile, tol: float = 1e-13, max_iter: int = 200):
    """Minimax chunk weights for a group with uneven bandwidths.

    Bisects on the round time ``xi``: a level is feasible iff the per-peer caps
    ``max(0, (xi*b_i - 1)/(M-2))`` sum to at least one. Returns
    ``(PartitionWeights, objective)``.
    """
    b = np.asarray(profile.b)
    M = len(b)
    if M <= 2:
        weights = PartitionWeights.uniform(M)
        return weights, max(transfer_times(weights, profile))

    def caps(xi):
        return np.maximum(0.0, (xi * b - 1.0) / (M - 2))

    lo = float(np.max(1.0 / b))
    hi = float(np.max((1.0 + (M - 2) / M) / b))
    if caps(lo).sum() >= 1.0:
        hi = lo
    else:
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            if caps(mid).sum() >= 1.0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= tol * hi:
                break
    c = caps(hi)
    w = c / c.sum()
    weights = PartitionWeights(tuple(w.tolist()))
    return weights, max(transfer_times(weights, profile))
