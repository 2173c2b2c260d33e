"""Oracle checks for the closed-form theory, with JSON-friendly verdicts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import Rng
from ..theory import (
    MomentInputs,
    SplitSpec,
    ar_restart_expected_rounds,
    exhaustive_contraction_oracle,
    integer_partitions,
    m1,
    m2,
    monte_carlo_contraction,
    monte_carlo_moments,
    published_contraction_factor,
    simplified_bound_holds,
    simplified_variance_bound,
    simulate_hypercube_dropout_variance,
    split_contraction_factor,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    gated: bool = True
    summary: str = ""
    details: list = field(default_factory=list)


def _within(estimate: float, se: float, exact: float, k: float, atol: float = 1e-12) -> bool:
    return abs(estimate - exact) <= k * se + atol


def check_moments(samples: int = 10**6, seed: int = 0, M_max: int = 20) -> CheckResult:
    rng = Rng(seed, "moments")
    fails, details = 0, []
    for M in range(1, M_max + 1):
        for p in np.round(np.linspace(0.0, 1.0, 11), 10):
            inp = MomentInputs(M, float(p))
            (e1, s1), (e2, s2) = monte_carlo_moments(inp, samples, rng.stream(f"{M}/{p}"))
            ok = _within(e1, s1, m1(inp), 4) and _within(e2, s2, m2(inp), 4)
            fails += not ok
            details.append({"M": M, "p": float(p), "m1": m1(inp), "mc1": e1, "se1": s1, "m2": m2(inp), "mc2": e2, "se2": s2, "ok": ok})
    exact_ok = all(m1(MomentInputs(1, p)) == 1.0 for p in (0.0, 0.3, 0.5, 1.0))
    exact_ok &= abs(m1(MomentInputs(2, 0.5)) - 0.875) <= 1e-12 and abs(m2(MomentInputs(2, 0.5)) - 0.8125) <= 1e-12
    return CheckResult(
        "inverse_moments",
        fails == 0 and exact_ok,
        summary=f"{len(details) - fails}/{len(details)} grid points within 4 SE; hand values ok={exact_ok}",
        details=details,
    )


def check_contraction(trials: int = 10**5, seed: int = 0, N_max: int = 6) -> tuple[CheckResult, CheckResult]:
    rng = Rng(seed, "contraction")
    details, report, fails = [], [], 0
    for N in range(2, N_max + 1):
        vectors = rng.stream(f"vectors/{N}").standard_normal(N)
        for sizes in integer_partitions(N):
            spec = SplitSpec(sizes)
            exact = exhaustive_contraction_oracle(spec, vectors)
            est, se = monte_carlo_contraction(spec, vectors, trials, rng.stream(f"mc/{sizes}"))
            ok = _within(est, se, exact, 3)
            fails += not ok
            details.append({"sizes": list(sizes), "exhaustive": exact, "monte_carlo": est, "se": se, "ok": ok})
            report.append(
                {
                    "sizes": list(sizes),
                    "exhaustive": exact,
                    "closed_form_exact": split_contraction_factor(spec),
                    "published_factor": published_contraction_factor(spec),
                    "delta": published_contraction_factor(spec) - exact,
                }
            )
    gated = CheckResult(
        "contraction_oracle",
        fails == 0,
        summary=f"{len(details) - fails}/{len(details)} partitions within 3 SE",
        details=details,
    )
    info = CheckResult(
        "published_factor_vs_oracle",
        True,
        gated=False,
        summary=f"max |published - exhaustive| = {max(abs(r['delta']) for r in report):.4g}",
        details=report,
    )
    return gated, info


def check_simplified_bound(M_range=range(11, 41), n_p: int = 31, T_range=range(1, 7)) -> CheckResult:
    violations = []
    grid = np.linspace(2.0 / 3.0, 1.0, n_p)
    total = 0
    for M in M_range:
        for p in grid:
            for T in T_range:
                total += 1
                if not simplified_bound_holds(M, float(p), T):
                    inp = MomentInputs(M - 1, float(p))
                    value = M ** (T - 1) * m1(inp) * m2(inp) ** (T - 1)
                    violations.append(
                        {"M": M, "p": float(p), "T": T, "bound": value, "simplified": simplified_variance_bound(M, T, 1.0)}
                    )
    return CheckResult(
        "simplified_variance_bound",
        not violations,
        summary=f"{total - len(violations)}/{total} points dominated",
        details=violations,
    )


def check_dropout_variance(trials: int = 10**4, seed: int = 0) -> CheckResult:
    rng = Rng(seed, "dropout")
    details, fails = [], 0
    for M in (11, 16):
        for p in (0.5, 2.0 / 3.0, 0.9):
            for T in (1, 2):
                est, se = simulate_hypercube_dropout_variance(M, 2, p, T, 1.0, trials, rng.stream(f"{M}/{p}/{T}"))
                inp = MomentInputs(M - 1, p)
                bound = M ** (T - 1) * m1(inp) * m2(inp) ** (T - 1)
                ok = est <= bound
                fails += not ok
                details.append({"M": M, "p": p, "T": T, "simulated": est, "se": se, "bound": bound, "ok": ok})
    return CheckResult(
        "dropout_variance_bound",
        fails == 0,
        summary=f"{len(details) - fails}/{len(details)} settings below the bound",
        details=details,
    )


def check_ar_restart_formula() -> CheckResult:
    cases = [((512, 0.0, 50), 1.0), ((512, 0.001, 50), 1.67), ((512, 0.01, 50), 43.0)]
    details = []
    ok = True
    for (N, p, cap), expect in cases:
        value = ar_restart_expected_rounds(N, p, cap)
        good = abs(value - expect) <= 0.02 * expect
        ok &= good
        details.append({"N": N, "p": p, "cap": cap, "value": value, "expected": expect, "ok": bool(good)})
    return CheckResult("ar_restart_formula", ok, summary="closed-form spot values", details=details)


def run_theory_suite(quick: bool = False, seed: int = 0) -> dict:
    """Run every oracle check; ``quick`` shrinks sample sizes for smoke runs."""
    samples = 10**4 if quick else 10**6
    trials = 10**3 if quick else 10**5
    drop_trials = 500 if quick else 10**4
    checks = [check_moments(samples, seed)]
    checks.extend(check_contraction(trials, seed))
    checks.append(check_simplified_bound())
    checks.append(check_dropout_variance(drop_trials, seed))
    checks.append(check_ar_restart_formula())
    verdicts = [asdict(c) for c in checks]
    passed = all(c.passed for c in checks if c.gated)
    return {"passed": passed, "checks": verdicts}


def summary_lines(result: dict) -> list[str]:
    lines = []
    for check in result["checks"]:
        tag = "PASS" if check["passed"] else "FAIL"
        if not check["gated"]:
            tag = "INFO"
        lines.append(f"[{tag}] {check['name']}: {check['summary']}")
    return lines

