import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moshpit_lab.core import (
    FailureModel,
    GridConfig,
    Rng,
    as_params,
    distortion,
    mean_drift,
    pairwise_sum,
    segment_means,
    seeded_standard_normal,
)


def test_distortion_examples():
    assert distortion([5.0, 5.0], 5.0) == 0.0
    assert distortion([0.0, 2.0], 1.0) == 1.0
    assert distortion([1, 2, 3, 4], 2.5) == pytest.approx(1.25, abs=1e-15)


def test_distortion_dimension_mismatch():
    with pytest.raises(ValueError):
        distortion([[1.0, 2.0]], [1.0, 2.0, 3.0])


def test_standard_normal_moments():
    n = 10**6
    x = seeded_standard_normal(Rng(0).stream("init"), n)
    assert abs(x.mean()) < 4 / np.sqrt(n)
    assert abs(x.var() - 1.0) < 0.01


def test_standard_normal_determinism():
    a = seeded_standard_normal(Rng(42).stream("init"), 100)
    b = seeded_standard_normal(Rng(42).stream("init"), 100)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        seeded_standard_normal(Rng(42).stream("init"), 0)


def test_streams_are_independent_by_name_and_context():
    r = Rng(1)
    a = r.stream("failures").random(5)
    b = r.stream("splits").random(5)
    c = Rng(1, "other").stream("failures").random(5)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(Rng(1).child("x").stream("s").random(3), Rng(1, "x").stream("s").random(3))


def test_grid_config_validation():
    assert GridConfig(3, 2).capacity == 9
    for bad in ((0, 1), (2, 0), (2, 1, 0)):
        with pytest.raises(ValueError):
            GridConfig(*bad)
    with pytest.raises(ValueError):
        GridConfig(2, 2).check_fits(5)


def test_failure_model():
    with pytest.raises(ValueError):
        FailureModel(1.5)
    gen = np.random.default_rng(0)
    assert not FailureModel(0.0).sample(gen, 10).any()
    assert FailureModel(1.0).sample(gen, 10).all()
    assert FailureModel(0.0, churn=[(1, -2)]).churn == ((1, -2),)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300))
def test_pairwise_sum_matches_fsum(xs):
    import math

    assert pairwise_sum(np.array(xs)) == pytest.approx(math.fsum(xs), rel=1e-12, abs=1e-6)


@settings(max_examples=50)
@given(st.integers(1, 60), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_segment_means(n, k, seed):
    gen = np.random.default_rng(seed)
    values = gen.standard_normal((n, 3))
    labels = gen.integers(0, k, n)
    means, inverse, counts = segment_means(values, labels)
    for g, label in enumerate(np.unique(labels)):
        assert np.allclose(means[g], values[labels == label].mean(axis=0), atol=1e-13)
        assert counts[g] == np.sum(labels == label)
    assert np.array_equal(np.unique(labels)[inverse], labels)


def test_as_params_shapes():
    assert as_params([1.0, 2.0]).shape == (2, 1)
    assert as_params([[1.0, 2.0]]).shape == (1, 2)
    with pytest.raises(ValueError):
        as_params(np.zeros((2, 2, 2)))


def test_mean_drift_zero_for_permutation():
    x = np.arange(10.0)
    assert mean_drift(x, x[::-1]) <= 1e-15
