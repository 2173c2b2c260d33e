"""Shared value types, seeded random streams and the distortion metric."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
import numpy as np

__all__ = [
    "GridConfig",
    "FailureModel",
    "Rng",
    "as_params",
    "pairwise_sum",
    "segment_means",
    "distortion",
    "seeded_standard_normal",
    "mean_drift",
    "check_finite",
]


@dataclass(frozen=True)
class GridConfig:
    """Virtual ``M**d`` grid that Moshpit averaging runs over."""

    M: int
    d: int
    T: int = 1

    def __post_init__(self):
        for name in ("M", "d", "T"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"GridConfig.{name} must be a positive integer, got {value!r}")

    @property
    def capacity(self) -> int:
        return self.M**self.d

    def check_fits(self, n_peers: int) -> None:
        if n_peers > self.capacity:
            raise ValueError(
                f"{n_peers} peers do not fit in a {self.M}^{self.d} grid (capacity {self.capacity})"
            )


@dataclass(frozen=True)
class FailureModel:
    """Per-peer, per-round fail-stop probability plus an optional churn schedule.

    ``churn`` is a sequence of ``(round, peer_count_delta)`` pairs; it is only
    consumed by drivers that support dynamic membership.
    """

    p_round: float = 0.0
    churn: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.p_round <= 1.0:
            raise ValueError(f"p_round must lie in [0, 1], got {self.p_round}")
        object.__setattr__(self, "churn", tuple((int(r), int(dlt)) for r, dlt in self.churn))

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """Boolean mask of peers that fail this round."""
        if self.p_round == 0.0:
            return np.zeros(n, dtype=bool)
        return gen.random(n) < self.p_round


def _stable_words(*parts) -> list[int]:
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class Rng:
    """Seed holder that hands out independent, named numpy generators.

    Each concern (``"init"``, ``"failures"``, ``"placement"``, ...) gets its own
    stream so that, e.g., changing the failure rate never perturbs the initial
    values drawn for a trial.
    """

    def __init__(self, seed: int, *context):
        self.seed = int(seed) & (2**64 - 1)
        self.context = tuple(context)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
            spawn = tuple(_stable_words(self.context, name))
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=spawn)))
            self._streams[name] = gen
        return gen

    def child(self, *context) -> "Rng":
        return Rng(self.seed, *self.context, *context)

    def __repr__(self):
        return f"Rng(seed={self.seed}, context={self.context!r})"


def as_params(values) -> np.ndarray:
    """Coerce peer parameters to a float64 ``(n_peers, s)`` array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a list of parameter vectors, got shape {arr.shape}")
    return arr


def pairwise_sum(rows: np.ndarray, axis: int = 0) -> np.ndarray:
    """Tree summation along ``axis``; error grows with log(n) instead of n."""
    arr = np.moveaxis(np.asarray(rows, dtype=np.float64), axis, 0)
    while arr.shape[0] > 1:
        n = arr.shape[0]
        half = n // 2
        paired = arr[:half] + arr[half : 2 * half]
        arr = np.concatenate([paired, arr[2 * half :]], axis=0) if n % 2 else paired
    if arr.shape[0] == 0:
        return np.zeros(arr.shape[1:])
    return arr[0]


def segment_means(values: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean of ``values`` rows within each label, via padded tree summation.

    Returns ``(means, inverse, counts)`` where ``means[inverse[i]]`` is the mean
    of the group containing row ``i``.
    """
    values = np.asarray(values, dtype=np.float64)
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.empty(len(labels), dtype=np.int64)
    pos[order] = np.arange(len(labels)) - np.repeat(starts, counts)
    padded = np.zeros((len(uniq), int(counts.max()), values.shape[1]))
    padded[inverse, pos] = values
    sums = pairwise_sum(padded, axis=1)
    return sums / counts[:, None], inverse, counts


def distortion(peers, reference_mean) -> float:
    """Mean squared distance of peer vectors from a fixed reference mean."""
    arr = as_params(peers)
    ref = np.atleast_1d(np.asarray(reference_mean, dtype=np.float64))
    if ref.ndim != 1 or ref.shape[0] != arr.shape[1]:
        raise ValueError(
            f"dimension mismatch: peers have dimension {arr.shape[1]}, reference has {ref.shape}"
        )
    if arr.shape[0] == 0:
        return 0.0
    dev = arr - ref
    return float(pairwise_sum(np.einsum("ij,ij->i", dev, dev)) / arr.shape[0])


def seeded_standard_normal(gen: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return gen.standard_normal(n)


def mean_drift(before: np.ndarray, after: np.ndarray) -> float:
    """Relative change of the global mean, scaled by the spread of ``before``."""
    before = as_params(before)
    after = as_params(after)
    m0 = pairwise_sum(before) / before.shape[0]
    m1 = pairwise_sum(after) / after.shape[0]
    scale = max(float(np.max(np.abs(before))), float(np.max(np.abs(m0))), np.finfo(float).tiny)
    return float(np.max(np.abs(m1 - m0)) / scale)


def check_finite(arr: np.ndarray, what: str = "parameters") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} encountered")

