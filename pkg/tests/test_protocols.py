import numpy as np
import pytest

from moshpit_lab.core import FailureModel, GridConfig, Rng
from moshpit_lab.protocols import (
    ProtocolKind,
    run_allreduce_restart,
    run_gossip,
    run_moshpit,
    run_protocol,
    run_pushsum,
    run_random_groups,
)
from moshpit_lab.theory import SplitSpec, ar_restart_expected_rounds, exhaustive_contraction_oracle


def test_full_grid_exact_after_d_rounds():
    report = run_moshpit(GridConfig(3, 2, 2), np.arange(9.0), rng=Rng(1))
    assert report.distortion[0] > 0
    assert report.distortion[1] <= 1e-24
    assert report.rounds_to(1e-24) == 2


@pytest.mark.parametrize("M", [2, 3, 4, 5])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_torus_equivalence(M, d):
    N = M**d
    values = Rng(M * 10 + d).stream("v").standard_normal((N, 2))
    report = run_moshpit(GridConfig(M, d, d), values, rng=Rng(M + d))
    assert report.distortion[d - 1] <= 1e-24
    if d > 1:
        assert report.distortion[d - 2] > 0


def test_single_peer():
    report = run_moshpit(GridConfig(4, 2, 3), [1.5], rng=Rng(0))
    assert report.initial_distortion == 0.0
    assert report.rounds_to(1e-9) == 1


def test_moshpit_rejects_overfull_grid():
    with pytest.raises(ValueError):
        run_moshpit(GridConfig(2, 2), 5)


def test_simulated_matchmaking_agrees_with_ideal_without_failures():
    grid = GridConfig(4, 2, 4)
    for seed in range(3):
        a = run_moshpit(grid, 13, rng=Rng(seed))
        b = run_moshpit(grid, 13, rng=Rng(seed), matchmaking="simulated")
        assert np.allclose(a.distortion, b.distortion, rtol=1e-12, atol=1e-30)
        assert b.dht_requests > 0


def test_simulated_matchmaking_with_failures_conserves_mean():
    report = run_moshpit(GridConfig(4, 2, 6), 14, FailureModel(0.2), Rng(3), matchmaking="simulated")
    assert max(report.drift) <= 1e-12
    assert report.distortion[-1] < report.initial_distortion


def test_random_groups_single_group():
    report = run_random_groups(10, 16, 3, rng=Rng(0))
    assert report.rounds_to(1e-24) == 1


@pytest.mark.parametrize("N,M", [(3, 2), (4, 3), (5, 2), (6, 4), (6, 2)])
def test_random_groups_ratio_matches_oracle(N, M):
    values = np.random.default_rng(N * M).standard_normal(N)
    r = -(-N // M)
    sizes = tuple(len(range(i, N, r)) for i in range(r))
    exact = exhaustive_contraction_oracle(SplitSpec(sizes), values)
    ratios = []
    for seed in range(3000):
        rep = run_random_groups(values, M, 1, rng=Rng(seed, "rg"))
        ratios.append(rep.distortion[0] / rep.initial_distortion)
    ratios = np.array(ratios)
    se = ratios.std(ddof=1) / np.sqrt(len(ratios))
    assert abs(ratios.mean() - exact) <= 3 * se + 1e-12


def test_gossip_three_peers_exact():
    report = run_gossip([0.0, 3.0, 9.0], 1, rng=Rng(0))
    assert report.distortion[0] <= 1e-28


def test_gossip_n512_never_reaches_threshold():
    report = run_gossip(512, 50, rng=Rng(0))
    assert report.rounds_to(1e-4) == 50


def test_gossip_requires_three():
    with pytest.raises(ValueError):
        run_gossip(2, 1)


def test_pushsum_two_peers_exact():
    report = run_pushsum([1.0, 5.0], 1, rng=Rng(0))
    assert report.distortion[0] == 0.0


def test_pushsum_weight_mass_conserved():
    for rounds in (1, 4, 9):
        report = run_pushsum(37, rounds, FailureModel(0.2), Rng(rounds))
        assert report.final_weights.sum() == pytest.approx(37, abs=1e-12)
        assert max(report.drift) <= 1e-12


def test_pushsum_exponential_schedule_is_exact_on_powers_of_two():
    report = run_pushsum(8, 3, rng=Rng(0))
    assert report.distortion[-1] <= 1e-28


def test_pushsum_random_schedule_matches_reference_rounds():
    rounds = [
        run_pushsum(512, 50, rng=Rng(s, "ps"), schedule="random", stop_early=True).rounds_to(1e-4)
        for s in range(100)
    ]
    assert abs(np.mean(rounds) - 15.6) <= 2.0


def test_pushsum_bad_schedule():
    with pytest.raises(ValueError):
        run_pushsum(4, 1, schedule="ring")


def test_allreduce_restart_p0():
    for N in (512, 768, 900, 1024):
        assert run_allreduce_restart(N, 50, rng=Rng(N)).rounds_to(1e-9) == 1


def test_allreduce_restart_matches_formula():
    rounds = [
        run_allreduce_restart(512, 50, FailureModel(0.001), Rng(s, "ar"), stop_early=True).rounds_to(1e-9)
        for s in range(1000)
    ]
    mean, se = np.mean(rounds), np.std(rounds, ddof=1) / np.sqrt(len(rounds))
    assert abs(mean - 1.6) <= 0.2
    assert abs(mean - ar_restart_expected_rounds(512, 0.001, 50)) <= 3 * se


@pytest.mark.parametrize("kind", list(ProtocolKind))
def test_mean_conservation_under_failures(kind):
    for p in (0.0, 0.05, 0.5):
        report = run_protocol(kind, 100, GridConfig(8, 3), FailureModel(p), Rng(5, kind.value), cap=20, stop_early=False)
        assert max(report.drift) <= 1e-12
        assert len(report.distortion) == report.rounds == 20
        assert len(report.active_counts) == 20
        assert all(v <= 20 for v in report.rounds_to_map.values())


@pytest.mark.parametrize("kind", [ProtocolKind.MOSHPIT, ProtocolKind.RANDOM_GROUPS])
def test_distortion_non_increasing_in_expectation(kind):
    curves = [
        run_protocol(kind, 200, GridConfig(8, 3), FailureModel(0.05), Rng(s, "mono"), cap=10, stop_early=False).distortion
        for s in range(100)
    ]
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) <= 0)


def test_moshpit_converges_for_every_seed():
    for seed in range(50):
        report = run_moshpit(GridConfig(8, 2, 50), 48, FailureModel(0.5), Rng(seed, "conv"))
        assert report.distortion[49] < report.initial_distortion


def test_trial_determinism():
    for kind in ProtocolKind:
        a = run_protocol(kind, 64, GridConfig(8, 2), FailureModel(0.01), Rng(9), cap=10)
        b = run_protocol(kind, 64, GridConfig(8, 2), FailureModel(0.01), Rng(9), cap=10)
        assert a.distortion == b.distortion
        assert a.active_counts == b.active_counts


def test_cost_units_follow_rounds():
    report = run_moshpit(GridConfig(32, 2, 2), 1024, rng=Rng(0))
    assert report.cost_units == pytest.approx(2 * (10 + 32 + 32 * 31 / 32))
