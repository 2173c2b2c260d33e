"""Closed-form averaging theory and the brute-force checks that back it."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import as_params, segment_means

__all__ = [
    "SplitSpec",
    "MomentInputs",
    "published_contraction_factor",
    "split_contraction_factor",
    "exhaustive_contraction_oracle",
    "monte_carlo_contraction",
    "m1",
    "m2",
    "m1_enumerated",
    "m2_enumerated",
    "monte_carlo_moments",
    "variance_bound",
    "simplified_variance_bound",
    "simplified_bound_holds",
    "SimplifiedBoundWarning",
    "simulate_hypercube_dropout_variance",
    "complexity_estimate",
    "ar_restart_expected_rounds",
    "ar_restart_rounds_std",
    "integer_partitions",
]

MAX_EXHAUSTIVE_PEERS = 8


class SimplifiedBoundWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SplitSpec:
    """Random split of ``N`` peers into contiguous blocks of fixed sizes."""

    group_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.group_sizes)
        if not sizes or any(m < 1 for m in sizes):
            raise ValueError(f"group sizes must be positive, got {self.group_sizes!r}")
        object.__setattr__(self, "group_sizes", sizes)

    @property
    def N(self) -> int:
        return sum(self.group_sizes)

    @property
    def r(self) -> int:
        return len(self.group_sizes)


@dataclass(frozen=True)
class MomentInputs:
    M: int
    p: float

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


def published_contraction_factor(spec: SplitSpec) -> float:
    """Per-round factor ``(r-1)/N + r/N**2`` as published for the split model."""
    N, r = spec.N, spec.r
    return (r - 1) / N + r / N**2


def split_contraction_factor(spec: SplitSpec) -> float:
    """Exact expected one-round ratio under a uniformly random permutation.

    Uses the pair co-membership probability ``M_i(M_i-1)/(N(N-1))``; the
    result does not depend on the input vectors.
    """
    N, r = spec.N, spec.r
    if N == 1:
        return 0.0
    return (r - 1) / (N - 1)


def _split_distortion(values: np.ndarray, labels: np.ndarray, mean: np.ndarray) -> float:
    means, inverse, _ = segment_means(values, labels)
    dev = means[inverse] - mean
    return float(np.mean(np.einsum("ij,ij->i", dev, dev)))


def exhaustive_contraction_oracle(spec: SplitSpec, vectors) -> float:
    """E[distortion_after] / distortion_before by enumerating every split.

    Every permutation of the peers is cut into contiguous blocks of
    ``spec.group_sizes``; distinct assignments are weighted equally because
    each arises from the same number of permutations.
    """
    values = as_params(vectors)
    N = values.shape[0]
    if N != spec.N:
        raise ValueError(f"{N} vectors given for a split of {spec.N} peers")
    if N > MAX_EXHAUSTIVE_PEERS:
        raise ValueError(f"exhaustive enumeration refused for N={N} > {MAX_EXHAUSTIVE_PEERS}")
    mean = values.mean(axis=0)
    before = float(np.mean(np.sum((values - mean) ** 2, axis=1)))
    if before == 0.0:
        raise ValueError("degenerate input: all vectors are equal")
    block_of_slot = np.repeat(np.arange(spec.r), spec.group_sizes)
    seen = set()
    total = 0.0
    for perm in itertools.permutations(range(N)):
        labels = np.empty(N, dtype=np.int64)
        labels[list(perm)] = block_of_slot
        key = tuple(labels)
        if key in seen:
            continue
        seen.add(key)
        total += _split_distortion(values, labels, mean)
    return total / len(seen) / before


def monte_carlo_contraction(spec: SplitSpec, vectors, trials: int, gen: np.random.Generator):
    """Sample mean and standard error of the one-round distortion ratio."""
    values = as_params(vectors)
    N = values.shape[0]
    mean = values.mean(axis=0)
    dev0 = values - mean
    before = float(np.mean(np.sum(dev0**2, axis=1)))
    block_of_slot = np.repeat(np.arange(spec.r), spec.group_sizes)
    perms = gen.permuted(np.tile(np.arange(N), (trials, 1)), axis=1)
    labels = np.empty_like(perms)
    np.put_along_axis(labels, perms, np.broadcast_to(block_of_slot, perms.shape), axis=1)
    # per-trial group sums via one-hot over (trial, block)
    onehot = np.zeros((trials, spec.r, N))
    onehot[np.arange(trials)[:, None], labels, np.arange(N)[None, :]] = 1.0
    sizes = np.asarray(spec.group_sizes, dtype=np.float64)
    group_means = onehot @ dev0 / sizes[None, :, None]
    # distortion after = (1/N) * sum_groups size * ||group mean||^2 (deviation frame)
    after = np.einsum("tgs,tgs,g->t", group_means, group_means, sizes) / N
    ratios = after / before
    se = float(ratios.std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("inf")
    return float(ratios.mean()), se


def integer_partitions(n: int, max_part: int | None = None):
    """All partitions of ``n`` as non-increasing tuples."""
    if max_part is None:
        max_part = n
    if n == 0:
        yield ()
        return
    for first in range(min(n, max_part), 0, -1):
        for rest in integer_partitions(n - first, first):
            yield (first,) + rest


def m1(inp: MomentInputs) -> float:
    """E[min(1/xi, 1)] for xi ~ Binom(M, p), in closed form."""
    M, q = inp.M, 1.0 - inp.p
    qM = q**M
    return qM + sum((q ** (M - i) - qM) / i for i in range(1, M + 1))


def m2(inp: MomentInputs) -> float:
    """E[min(1/xi**2, 1)] for xi ~ Binom(M, p), in closed form."""
    M, q = inp.M, 1.0 - inp.p
    qM = q**M
    tail = [0.0] * (M + 2)
    for j in range(M, 0, -1):
        tail[j] = tail[j + 1] + 1.0 / j
    return qM + sum((q ** (M - i) - qM) / i * tail[i] for i in range(1, M + 1))


def _binom_pmf(M: int, p: float) -> list[float]:
    return [math.comb(M, k) * p**k * (1.0 - p) ** (M - k) for k in range(M + 1)]


def m1_enumerated(inp: MomentInputs) -> float:
    pmf = _binom_pmf(inp.M, inp.p)
    return sum(w * (1.0 if k == 0 else 1.0 / k) for k, w in enumerate(pmf))


def m2_enumerated(inp: MomentInputs) -> float:
    pmf = _binom_pmf(inp.M, inp.p)
    return sum(w * (1.0 if k == 0 else 1.0 / k**2) for k, w in enumerate(pmf))


def monte_carlo_moments(inp: MomentInputs, samples: int, gen: np.random.Generator):
    """Monte-Carlo estimates ``((m1, se1), (m2, se2))``."""
    xi = gen.binomial(inp.M, inp.p, size=samples).astype(np.float64)
    inv = np.where(xi > 0, 1.0 / np.maximum(xi, 1.0), 1.0)
    out = []
    for est in (inv, inv**2):
        se = float(est.std(ddof=1) / math.sqrt(samples))
        out.append((float(est.mean()), se))
    return tuple(out)


def simplified_variance_bound(M: int, T: int, sigma2: float) -> float:
    return 2.0 * sigma2 / (M * (M / 3.0) ** (T - 1))


def simplified_bound_holds(M: int, p: float, T: int) -> bool:
    inp = MomentInputs(M - 1, p)
    value = M ** (T - 1) * m1(inp) * m2(inp) ** (T - 1)
    return value <= simplified_variance_bound(M, T, 1.0) * (1.0 + 1e-12)


def variance_bound(M: int, p: float, T: int, sigma2: float) -> float:
    """Per-peer output variance bound after ``T`` rounds with random dropout.

    ``p`` is the probability that a grid cell holds a peer. For ``p >= 2/3``
    and ``M >= 11`` the value is also compared with the simplified bound and a
    ``SimplifiedBoundWarning`` is emitted when it is exceeded (this happens
    for M in 11..13 close to p = 2/3 once T >= 3).
    """
    if M < 2 or T < 1 or sigma2 < 0 or not 0.0 <= p <= 1.0:
        raise ValueError("variance_bound needs M >= 2, T >= 1, sigma2 >= 0, p in [0, 1]")
    inp = MomentInputs(M - 1, p)
    value = M ** (T - 1) * sigma2 * m1(inp) * m2(inp) ** (T - 1)
    if p >= 2.0 / 3.0 and M >= 11:
        simple = simplified_variance_bound(M, T, sigma2)
        if value > simple * (1.0 + 1e-12):
            warnings.warn(
                f"simplified bound violated: {value:.6g} > {simple:.6g} (M={M}, p={p:.4g}, T={T})",
                SimplifiedBoundWarning,
                stacklevel=2,
            )
    return value


def simulate_hypercube_dropout_variance(
    M: int, d: int, p: float, T: int, sigma2: float, trials: int, gen: np.random.Generator
):
    """Per-peer output variance of axis-wise grid averaging with random dropout.

    Each of the ``M**d`` cells holds a peer independently with probability
    ``p``; inputs are i.i.d. with variance ``sigma2`` and mean zero. Round
    ``t`` averages peers that agree on every coordinate except axis ``t``.
    Returns ``(mean, standard_error)`` over all present peers of all trials.
    """
    if T > d:
        raise ValueError("axis-wise averaging runs at most d rounds")
    shape = (trials,) + (M,) * d
    present = gen.random(shape) < p
    theta = np.where(present, gen.standard_normal(shape) * math.sqrt(sigma2), 0.0)
    mask = present.astype(np.float64)
    for t in range(T):
        axis = 1 + t
        counts = mask.sum(axis=axis, keepdims=True)
        sums = theta.sum(axis=axis, keepdims=True)
        avg = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        theta = np.where(present, np.broadcast_to(avg, theta.shape), 0.0)
    sq = theta[present] ** 2
    if sq.size < 2:
        return 0.0, float("inf")
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))


def complexity_estimate(T: float, N: float, M: float, s: float) -> float:
    """Cost of ``T`` rounds: DHT lookups, matchmaking and butterfly traffic."""
    if T == 0:
        return 0.0
    return T * (math.log2(N) + M + max(s, M) * (M - 1) / M)


def ar_restart_expected_rounds(N: int, p: float, cap: int) -> float:
    """E[min(G, cap)] where G counts global All-Reduce attempts until success."""
    if N < 1 or cap < 1 or not 0.0 <= p <= 1.0:
        raise ValueError("need N >= 1, cap >= 1 and p in [0, 1]")
    q = (1.0 - p) ** N
    miss = 1.0 - q
    if miss == 0.0:
        return 1.0
    if miss == 1.0:
        return float(cap)
    return (1.0 - miss**cap) / q


def ar_restart_rounds_std(N: int, p: float, cap: int) -> float:
    """Standard deviation of ``min(G, cap)`` for the restart model."""
    mean = ar_restart_expected_rounds(N, p, cap)
    miss = 1.0 - (1.0 - p) ** N
    # E[X^2] = sum_k (2k - 1) P(X >= k)
    second = sum((2 * k - 1) * miss ** (k - 1) for k in range(1, cap + 1))
    return math.sqrt(max(0.0, second - mean**2))
