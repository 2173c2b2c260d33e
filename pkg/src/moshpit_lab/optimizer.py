"""Moshpit SGD: local SGD with periodic Moshpit averaging and peer churn.

Peers hold identical objectives. Every ``tau`` steps the post-step parameters
of the active peers are averaged with ``inner_rounds`` Moshpit rounds. Peers
leave between steps; joiners appear right after a synchronization and copy
parameters and step counter from a random active donor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FailureModel, GridConfig, Rng, check_finite
from .protocols import initial_key_codes, moshpit_rounds

__all__ = [
    "OptimizerConfig",
    "Objective",
    "Quadratic",
    "LogisticRegression",
    "RosenbrockLike",
    "PeerState",
    "validate_membership",
    "local_step",
    "AssumptionDiagnostics",
    "SgdResult",
    "run_moshpit_sgd",
    "theoretical_iteration_bound",
]


@dataclass(frozen=True)
class OptimizerConfig:
    gamma: float
    tau: int
    steps: int
    grid: GridConfig
    sigma: float = 0.0
    n_peers: int | None = None
    failure: FailureModel = FailureModel()
    inner_rounds: int | None = None
    init_spread: float = 0.0
    churn: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.inner_rounds is not None and self.inner_rounds < 1:
            raise ValueError("inner_rounds must be >= 1")
        object.__setattr__(self, "churn", tuple((int(k), int(dlt)) for k, dlt in self.churn))
        validate_membership(self.peers, self.churn, self.tau, self.grid.capacity)

    @property
    def peers(self) -> int:
        return self.grid.capacity if self.n_peers is None else self.n_peers

    @property
    def rounds_per_sync(self) -> int:
        return self.grid.d if self.inner_rounds is None else self.inner_rounds


class Objective:
    """Smooth objective evaluated row-wise on an ``(n, s)`` parameter array."""

    L: float
    mu: float
    dim: int
    theta_star: np.ndarray
    f_star: float

    def value(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Quadratic(Objective):
    """``0.5 * sum_j lam_j (theta_j - theta*_j)**2`` with ``lam`` spread over [mu, L]."""

    def __init__(self, dim: int, L: float = 1.0, mu: float = 1.0, theta_star=None):
        if not L >= mu >= 0 or L <= 0:
            raise ValueError("need L >= mu >= 0 and L > 0")
        self.dim, self.L, self.mu = dim, float(L), float(mu)
        self.lam = np.linspace(mu, L, dim) if dim > 1 else np.array([L])
        self.theta_star = np.zeros(dim) if theta_star is None else np.asarray(theta_star, dtype=np.float64)
        self.f_star = 0.0

    def value(self, theta):
        dev = np.atleast_2d(theta) - self.theta_star
        return 0.5 * (dev**2) @ self.lam

    def grad(self, theta):
        return (np.atleast_2d(theta) - self.theta_star) * self.lam


class LogisticRegression(Objective):
    """L2-regularised logistic loss on a fixed dataset with labels in {-1, +1}."""

    def __init__(self, X, y, reg: float = 0.1):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if reg <= 0:
            raise ValueError("reg must be > 0 so the problem is strongly convex")
        self.reg = float(reg)
        n, self.dim = self.X.shape
        self.mu = self.reg
        self.L = float(np.linalg.norm(self.X, 2) ** 2 / (4 * n) + self.reg)
        self.theta_star = self._newton()
        self.f_star = float(self.value(self.theta_star)[0])

    @classmethod
    def synthetic(cls, gen: np.random.Generator, n: int = 200, dim: int = 5, reg: float = 0.1):
        X = gen.standard_normal((n, dim))
        w = gen.standard_normal(dim)
        y = np.where(X @ w + 0.5 * gen.standard_normal(n) > 0, 1.0, -1.0)
        return cls(X, y, reg)

    def value(self, theta):
        margins = self.y * (np.atleast_2d(theta) @ self.X.T)
        loss = np.logaddexp(0.0, -margins).mean(axis=1)
        return loss + 0.5 * self.reg * np.sum(np.atleast_2d(theta) ** 2, axis=1)

    def grad(self, theta):
        theta = np.atleast_2d(theta)
        margins = self.y * (theta @ self.X.T)
        coef = -self.y * np.exp(-np.logaddexp(0.0, margins))
        return coef @ self.X / self.X.shape[0] + self.reg * theta

    def _newton(self, iters: int = 50) -> np.ndarray:
        theta = np.zeros(self.dim)
        n = self.X.shape[0]
        for _ in range(iters):
            margins = self.y * (self.X @ theta)
            sig = np.exp(-np.logaddexp(0.0, -margins))
            weights = sig * (1.0 - sig)
            hess = (self.X.T * weights) @ self.X / n + self.reg * np.eye(self.dim)
            step = np.linalg.solve(hess, self.grad(theta)[0])
            theta = theta - step
            if np.linalg.norm(step) < 1e-15:
                break
        return theta


class RosenbrockLike(Objective):
    """Sum over coordinate pairs of ``(1 - x)**2 + b (y - x**2)**2``; non-convex.

    ``L`` is a nominal smoothness constant for the box ``[-2, 2]**dim``.
    """

    def __init__(self, dim: int = 2, b: float = 10.0):
        if dim % 2:
            raise ValueError("dimension must be even")
        self.dim, self.b, self.mu = dim, float(b), 0.0
        self.L = float(2 + b * (12 * 4 + 4))
        self.theta_star = np.ones(dim)
        self.f_star = 0.0

    def value(self, theta):
        theta = np.atleast_2d(theta)
        x, y = theta[:, 0::2], theta[:, 1::2]
        return np.sum((1 - x) ** 2 + self.b * (y - x**2) ** 2, axis=1)

    def grad(self, theta):
        theta = np.atleast_2d(theta)
        x, y = theta[:, 0::2], theta[:, 1::2]
        g = np.empty_like(theta)
        g[:, 0::2] = -2 * (1 - x) - 4 * self.b * x * (y - x**2)
        g[:, 1::2] = 2 * self.b * (y - x**2)
        return g


@dataclass
class PeerState:
    theta: np.ndarray
    step: int = 0


def validate_membership(n0: int, churn, tau: int, capacity: int) -> list[int]:
    """Check a churn schedule and return the active count at every step boundary.

    ``churn`` holds ``(step, delta)`` pairs applied before step ``step``.
    Joins must land right after a synchronization (``step % tau == 0``), the
    count must stay within ``[1, capacity]``, and it may not halve between
    consecutive synchronizations.
    """
    if n0 < 1:
        raise ValueError("need at least one peer")
    if n0 > capacity:
        raise ValueError(f"{n0} peers do not fit in grid capacity {capacity}")
    deltas: dict[int, int] = {}
    for step, delta in churn:
        if step < 1:
            raise ValueError("churn steps start at 1")
        if delta > 0 and step % tau:
            raise ValueError(f"joiners at step {step} must arrive at a multiple of tau={tau}")
        deltas[step] = deltas.get(step, 0) + delta
    horizon = max(deltas, default=0)
    counts = [n0]
    for step in range(1, horizon + 1):
        n = counts[-1] + deltas.get(step, 0)
        if not 1 <= n <= capacity:
            raise ValueError(f"active peer count {n} at step {step} leaves [1, {capacity}]")
        counts.append(n)
    for a in range(0, horizon // tau + 1):
        now, later = a * tau, min((a + 1) * tau, horizon)
        if counts[now] > 2 * counts[later]:
            raise ValueError(f"active set more than halves between steps {now} and {later}")
    return counts


def local_step(theta: np.ndarray, objective: Objective, gamma: float, sigma: float, gen) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step per row; returns ``(new_theta, noise)``.

    Noise is Gaussian with variance ``sigma**2 / s`` per coordinate so its
    expected squared norm is ``sigma**2``.
    """
    theta = np.atleast_2d(theta)
    g = objective.grad(theta)
    check_finite(g, "gradient")
    noise = gen.standard_normal(theta.shape) * (sigma / math.sqrt(theta.shape[1])) if sigma > 0 else np.zeros_like(theta)
    return theta - gamma * (g + noise), noise


@dataclass
class AssumptionDiagnostics:
    V: list[float] = field(default_factory=list)
    V_sync: list[float] = field(default_factory=list)
    delta_aq_hat: float = 0.0
    sigma2_hat: float = 0.0
    delta_pv1_hat: float = 0.0
    delta_pv2_hat: float = 0.0
    n_min: int = 0
    r0_sq: float = 0.0
    f_gap0: float = 0.0


@dataclass
class SgdResult:
    f_gap: list[float]
    grad_norm_sq: list[float]
    mean_theta: np.ndarray
    weighted_f_gap: float
    diagnostics: AssumptionDiagnostics
    active_counts: list[int]
    final_thetas: np.ndarray


def _dispersion(thetas: np.ndarray) -> float:
    mean = thetas.mean(axis=0)
    return float(np.mean(np.sum((thetas - mean) ** 2, axis=1)))


def run_moshpit_sgd(config: OptimizerConfig, objective: Objective, rng: Rng, theta0=None) -> SgdResult:
    """Run ``config.steps`` iterations and collect trajectory metrics.

    ``theta0`` is the common starting point (default: zeros); with
    ``init_spread > 0`` every peer starts at an independent Gaussian
    perturbation of it.
    """
    grid = config.grid
    n0 = config.peers
    gamma = config.gamma
    start = np.zeros(objective.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    thetas = np.tile(start, (n0, 1))
    if config.init_spread > 0:
        thetas = thetas + config.init_spread * rng.stream("init").standard_normal(thetas.shape)
    steps = np.zeros(n0, dtype=np.int64)
    ids = np.arange(n0)
    next_id = n0
    cells = rng.stream("placement").permutation(grid.capacity)
    cell_of = {int(i): int(cells[i]) for i in ids}
    free = [int(c) for c in cells[n0:]]
    key_of = dict(zip(ids.tolist(), initial_key_codes(cells[:n0], grid).tolist()))

    noise_gen = rng.stream("noise")
    churn_gen = rng.stream("churn")
    churn: dict[int, int] = {}
    for step, delta in config.churn:
        churn[step] = churn.get(step, 0) + delta

    diag = AssumptionDiagnostics(n_min=n0)
    mean0 = thetas.mean(axis=0)
    diag.r0_sq = float(np.sum((mean0 - objective.theta_star) ** 2))
    diag.f_gap0 = float(objective.value(mean0)[0] - objective.f_star)
    f_gap, grad_sq, active = [], [], []
    noise_sq_sum, noise_count = 0.0, 0
    pv1_ratio, pv2_sq = 0.0, 0.0
    convex = objective.mu > 0
    # weighted average uses log-weights k*log(1/(1-gamma*mu)) to avoid overflow
    log_rate = -math.log1p(-gamma * objective.mu) if convex and gamma * objective.mu < 1 else 0.0
    log_wsum = -math.inf
    weighted = np.zeros(objective.dim)

    def record(k: int):
        nonlocal log_wsum, weighted
        mean = thetas.mean(axis=0)
        f_gap.append(float(objective.value(mean)[0] - objective.f_star))
        grad_sq.append(float(np.sum(objective.grad(mean) ** 2)))
        active.append(len(ids))
        V = _dispersion(thetas)
        diag.V.append(V)
        if k % config.tau == 0:
            diag.V_sync.append(V)
        lw = (k + 1) * log_rate
        new_sum = np.logaddexp(log_wsum, lw)
        weighted = weighted * math.exp(log_wsum - new_sum) + mean * math.exp(lw - new_sum)
        log_wsum = new_sum

    record(0)
    for k in range(config.steps):
        mean_k = thetas.mean(axis=0)
        thetas, noise = local_step(thetas, objective, gamma, config.sigma, noise_gen)
        check_finite(thetas)
        steps += 1
        noise_sq_sum += float(np.sum(noise**2))
        noise_count += noise.shape[0]
        if (k + 1) % config.tau == 0:
            codes = np.array([key_of[int(i)] for i in ids], dtype=np.int64)
            thetas, codes = moshpit_rounds(
                thetas, grid, config.rounds_per_sync, rng.child("sync", k + 1), config.failure, key_codes=codes
            )
            key_of.update(zip(ids.tolist(), codes.tolist()))
        hat = thetas.mean(axis=0)

        delta = churn.get(k + 1, 0)
        if delta < 0:
            leave = churn_gen.choice(len(ids), size=-delta, replace=False)
            keep = np.setdiff1d(np.arange(len(ids)), leave)
            for idx in leave:
                pid = int(ids[idx])
                free.append(cell_of.pop(pid))
                key_of.pop(pid)
            ids, thetas, steps = ids[keep], thetas[keep], steps[keep]
        elif delta > 0:
            donors = churn_gen.integers(0, len(ids), delta)
            spots = churn_gen.choice(len(free), size=delta, replace=False)
            new_cells = [free[s] for s in spots]
            for s in sorted(spots, reverse=True):
                free.pop(s)
            new_ids = np.arange(next_id, next_id + delta)
            next_id += delta
            for pid, cell in zip(new_ids.tolist(), new_cells):
                cell_of[pid] = cell
                key_of[pid] = int(initial_key_codes(np.array([cell]), grid)[0])
            ids = np.concatenate([ids, new_ids])
            thetas = np.concatenate([thetas, thetas[donors]])
            steps = np.concatenate([steps, steps[donors]])
        if len(ids) == 0:
            raise RuntimeError("all peers left")
        diag.n_min = min(diag.n_min, len(ids))

        if delta <= 0:
            new_mean = thetas.mean(axis=0)
            diff = new_mean - hat
            if convex:
                gap = float(diff @ (new_mean + hat - 2 * objective.theta_star))
                scale = gamma * objective.mu * float(np.sum((mean_k - objective.theta_star) ** 2))
                pv2_sq = max(pv2_sq, gap / gamma**2)
            else:
                g = objective.grad(mean_k)[0]
                gap = float(g @ diff + objective.L * diff @ diff)
                scale = gamma * float(g @ g)
                pv2_sq = max(pv2_sq, gap / (objective.L * gamma**2))
            if scale > 0:
                pv1_ratio = max(pv1_ratio, gap / scale)
        record(k + 1)

    diag.sigma2_hat = noise_sq_sum / noise_count if noise_count else 0.0
    diag.delta_aq_hat = math.sqrt(max(diag.V_sync)) / gamma if diag.V_sync else 0.0
    diag.delta_pv1_hat = max(0.0, pv1_ratio)
    diag.delta_pv2_hat = math.sqrt(max(0.0, pv2_sq))
    return SgdResult(
        f_gap=f_gap,
        grad_norm_sq=grad_sq,
        mean_theta=thetas.mean(axis=0),
        weighted_f_gap=float(objective.value(weighted)[0] - objective.f_star),
        diagnostics=diag,
        active_counts=active,
        final_thetas=thetas,
    )


def theoretical_iteration_bound(
    objective: Objective, config: OptimizerConfig, diagnostics: AssumptionDiagnostics, epsilon: float, branch: str | None = None
) -> float:
    """Iteration count predicted by the convergence bounds, in order units.

    ``branch`` is ``"strongly_convex"``, ``"convex"`` or ``"nonconvex"``;
    by default it follows ``objective.mu``. Returns ``inf`` when the
    vanishing-peer constant makes the bound vacuous.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if branch is None:
        branch = "strongly_convex" if objective.mu > 0 else "convex"
    L, mu, tau = objective.L, objective.mu, config.tau
    d1, d2sq = diagnostics.delta_pv1_hat, diagnostics.delta_pv2_hat**2
    aq_sq, s2 = diagnostics.delta_aq_hat**2, diagnostics.sigma2_hat
    n_min = max(diagnostics.n_min, 1)
    noise = d2sq + s2 / n_min
    local = L * ((tau - 1) * s2 + aq_sq)
    if branch == "strongly_convex":
        if mu <= 0:
            raise ValueError("strongly convex branch needs mu > 0")
        if d1 >= 1:
            return math.inf
        c = 1.0 - d1
        return L / (c * mu) + noise / (c * mu * epsilon) + math.sqrt(local / (c**2 * mu**2 * epsilon))
    if branch == "convex":
        if d1 >= 1:
            return math.inf
        r0 = diagnostics.r0_sq
        return L * r0 / epsilon + r0 * noise / epsilon**2 + r0 * math.sqrt(local) / epsilon**1.5
    if branch == "nonconvex":
        if d1 >= 0.5:
            return math.inf
        c = 1.0 - 2.0 * d1
        bracket = 1 + tau * math.sqrt(c) + noise / epsilon**2 + math.sqrt(c * (aq_sq + (tau - 1) * s2)) / epsilon
        return L * diagnostics.f_gap0 / (c**2 * epsilon**2) * bracket
    raise ValueError(f"unknown branch {branch!r}")
