import math

import numpy as np
import pytest
from scipy import stats

from dstsom.design import GLOBAL_COLUMNS
from dstsom.ordinal import Link, OrdinalScale, link_inverse, sequential_to_category_probs
from dstsom.simulate import GroundTruth, sample_sequential, simulate_dataset, simulate_field
from dstsom.spacetime import ARParams, MaternParams, build_H


def truth(sigma=1.0, r=5.0, rho=0.6, cut=(0.5, 0.0, -0.5, -1.0), glob=(-0.3, 0.1, 0.15, 0.4, 0.2), sites=10, **kw):
    return GroundTruth.random_sites(
        sites, 15.0, 4, matern=MaternParams(sigma, r), ar=ARParams(rho), beta_cut=cut, beta_global=glob, **kw
    )


def test_deterministic():
    a = simulate_dataset(truth(), [2019, 2020], 100, 7)
    b = simulate_dataset(truth(), [2019, 2020], 100, 7)
    assert a.observations == b.observations
    assert a.controls == b.controls
    assert np.array_equal(a.field, b.field)
    c = simulate_dataset(truth(), [2019, 2020], 100, 8)
    assert [o.score for o in c.observations] != [o.score for o in a.observations]


def test_shapes_and_balance():
    d = simulate_dataset(truth(sites=5), [2019, 2020, 2021], 47, 0)
    assert len(d.observations) == 47
    assert d.field.shape == (3, 5)
    counts = {}
    for o in d.observations:
        counts[(o.site_id, o.year)] = counts.get((o.site_id, o.year), 0) + 1
    assert max(counts.values()) - min(counts.values()) <= 1
    assert all(1 <= o.score <= 5 for o in d.observations)


def test_validation():
    with pytest.raises(ValueError):
        truth(cut=(0.0, 1.0))
    with pytest.raises(ValueError):
        truth(glob=(0.0,))


class TestField:
    def test_rho_zero_independent(self):
        u = simulate_field(truth(rho=0.0, sites=3), 100_000, 1)
        for i in range(3):
            r = np.corrcoef(u[:-1, i], u[1:, i])[0, 1]
            assert abs(r) < 4 / math.sqrt(len(u))

    def test_lag_one(self):
        u = simulate_field(truth(rho=0.8, sites=2), 100_000, 2)
        assert np.corrcoef(u[:-1, 0], u[1:, 0])[0, 1] == pytest.approx(0.8, abs=0.01)

    def test_stationary_variance(self):
        t = truth(sigma=1.3, rho=0.5, sites=3)
        u = simulate_field(t, 100_000, 3)
        S = build_H(t.knots, t.matern) / (1 - 0.25)
        assert np.allclose(np.cov(u.T), S, rtol=0.05, atol=0.05 * S[0, 0])

    def test_tiny_sigma(self):
        u = simulate_field(truth(sigma=1e-9), 5, 0)
        assert np.max(np.abs(u)) < 1e-7


class TestScores:
    def test_huge_first_cut(self):
        d = simulate_dataset(truth(cut=(60.0, 0.0, 0.0, 0.0), sigma=1e-6), [2020, 2021], 200, 0)
        assert {o.score for o in d.observations} == {1}

    def test_huge_global_effect(self):
        glob = np.zeros(len(GLOBAL_COLUMNS))
        glob[GLOBAL_COLUMNS.index("forest")] = 80.0
        d = simulate_dataset(truth(glob=glob, sigma=1e-6, p_forest=1.0), [2020], 100, 0)
        assert {o.score for o in d.observations} == {5}

    def test_first_category_rises_with_cut(self):
        freq = []
        for c1 in (-1.0, 0.0, 1.0):
            d = simulate_dataset(truth(cut=(c1, 0.0, -0.5, -1.0)), [2020, 2021], 2000, 3)
            freq.append(np.mean([o.score == 1 for o in d.observations]))
        assert freq[0] < freq[1] < freq[2]


class TestSequentialSampler:
    @pytest.mark.parametrize("link", list(Link))
    def test_frequencies(self, link):
        delta = link_inverse(np.array([-0.5, 0.2, -1.0, 0.4]), link)
        pi = sequential_to_category_probs(delta)
        n = 100_000
        z = sample_sequential(np.tile(delta, (n, 1)), np.random.default_rng(0))
        freq = np.bincount(z, minlength=6)[1:] / n
        se = np.sqrt(pi * (1 - pi) / n)
        assert np.all(np.abs(freq - pi) < 3 * se)

    def test_agrees_with_categorical(self):
        delta = np.array([0.1, 0.3, 0.5, 0.2])
        pi = sequential_to_category_probs(delta)
        n = 100_000
        rng = np.random.default_rng(11)
        a = np.bincount(sample_sequential(np.tile(delta, (n, 1)), rng), minlength=6)[1:]
        b = np.bincount(rng.choice(5, size=n, p=pi), minlength=5)
        _, p, _, _ = stats.chi2_contingency(np.vstack([a, b]))
        assert p > 0.01

    def test_degenerate(self):
        rng = np.random.default_rng(0)
        assert np.array_equal(sample_sequential(np.array([[1.0, 0.0]]), rng), [1])
        assert np.array_equal(sample_sequential(np.array([[0.0, 0.0]]), rng), [3])


def test_truth_round_trip_dict():
    t = truth(scale=OrdinalScale(5))
    d = t.to_dict()
    assert d["C"] == 5 and d["beta_cut"] == list(t.beta_cut)
    assert set(d["beta_global"]) == set(GLOBAL_COLUMNS)
