import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ouevolve.errors import ConfigError, OddMomentUnsupported, QuadratureOverflow, SingularCovariance
from ouevolve.gaussmeasure import (
    GaussHermite,
    GaussianMeasure,
    MonteCarlo,
    absolute_moment,
    density,
    expectation,
    normal_absolute_moment,
    parse_scheme,
    symmetric_sqrt,
)


def random_measure(seed, n, centred=False):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    mean = np.zeros(n) if centred else rng.standard_normal(n)
    return GaussianMeasure(mean, B @ B.T + 0.2 * np.eye(n))


class TestMeasure:
    def test_density_matches_scipy(self):
        mu = random_measure(1, 3)
        y = np.random.default_rng(2).standard_normal((6, 3))
        ref = stats.multivariate_normal(mu.mean, mu.cov).pdf(y)
        assert np.allclose(density(mu, y), ref, rtol=1e-12)

    def test_sqrt_is_symmetric_root(self):
        mu = random_measure(3, 3)
        assert np.allclose(mu.sqrt, mu.sqrt.T)
        assert np.allclose(mu.sqrt @ mu.sqrt, mu.cov, atol=1e-13)
        assert np.allclose(symmetric_sqrt(mu.cov), mu.sqrt, atol=1e-13)

    def test_immutable(self):
        mu = random_measure(0, 2)
        with pytest.raises(AttributeError):
            mu.mean = np.zeros(2)
        with pytest.raises(ValueError):
            mu.cov[0, 0] = 5.0

    def test_singular_covariance(self):
        mu = GaussianMeasure([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
        assert not mu.is_positive_definite
        with pytest.raises(SingularCovariance):
            mu.inv_sqrt()
        with pytest.raises(SingularCovariance):
            expectation(mu, lambda y: y[:, 0])

    def test_det_factor(self):
        mu = GaussianMeasure([0.0, 0.0], np.diag([2.0, 3.0]))
        assert mu.det_factor == pytest.approx(2.0 * math.pi * math.sqrt(6.0))

    def test_sampling_reproducible(self):
        mu = random_measure(4, 2)
        assert np.array_equal(mu.sample(10, 7), mu.sample(10, 7))


class TestQuadrature:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_second_and_fourth_moments(self, seed, n):
        mu = random_measure(seed, n, centred=True)
        Q = mu.cov
        m2 = expectation(mu, lambda y: np.sum(y * y, axis=1))
        m4 = expectation(mu, lambda y: np.sum(y * y, axis=1) ** 2)
        assert m2 == pytest.approx(np.trace(Q), rel=1e-12)
        assert m4 == pytest.approx(np.trace(Q) ** 2 + 2.0 * np.trace(Q @ Q), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_mean_and_covariance(self, seed, n):
        mu = random_measure(seed, n)
        assert np.allclose(expectation(mu, lambda y: y), mu.mean, atol=1e-12)
        outer = expectation(mu, lambda y: np.einsum("ki,kj->kij", y - mu.mean, y - mu.mean))
        assert np.allclose(outer, mu.cov, atol=1e-12)

    def test_characteristic_function(self):
        mu = random_measure(9, 2)
        v = np.array([0.7, -0.4])
        got = expectation(mu, lambda y: np.cos(y @ v))
        assert got == pytest.approx(math.cos(v @ mu.mean) * math.exp(-0.5 * v @ mu.cov @ v), abs=1e-13)

    def test_monte_carlo_within_four_sigma(self):
        mu = random_measure(5, 2)
        value, err = expectation(mu, lambda y: np.cos(y[:, 0]), MonteCarlo(50_000, 1), return_error=True)
        exact = math.cos(mu.mean[0]) * math.exp(-0.5 * mu.cov[0, 0])
        assert abs(value - exact) <= 4.0 * err

    def test_monte_carlo_seed_reproducible(self):
        mu = random_measure(5, 2)
        f = lambda y: y[:, 0] ** 2  # noqa: E731
        assert expectation(mu, f, MonteCarlo(1000, 3)) == expectation(mu, f, MonteCarlo(1000, 3))
        assert expectation(mu, f, MonteCarlo(1000, 3)) != expectation(mu, f, MonteCarlo(1000, 4))

    def test_gauss_hermite_has_zero_error(self):
        mu = random_measure(5, 1)
        _, err = expectation(mu, lambda y: y[:, 0], return_error=True)
        assert err == 0.0

    def test_node_budget(self):
        with pytest.raises(QuadratureOverflow):
            GaussHermite(40).rule(4)

    def test_unstable_order_rejected(self):
        with pytest.raises(QuadratureOverflow):
            GaussHermite(1000).rule(1)

    def test_overflow_at_outer_nodes(self):
        mu = GaussianMeasure([0.0], [[100.0]])
        with pytest.raises(QuadratureOverflow):
            expectation(mu, lambda y: np.exp(np.exp(y[:, 0])))


class TestMoments:
    @pytest.mark.parametrize("n, k", [(1, 2), (1, 4), (2, 4), (3, 6), (3, 8)])
    def test_absolute_moment_standard(self, n, k):
        mu = GaussianMeasure(np.zeros(n), np.eye(n))
        assert absolute_moment(mu, k) == pytest.approx(normal_absolute_moment(n, k), rel=1e-12)

    def test_closed_forms(self):
        assert normal_absolute_moment(1, 4) == pytest.approx(3.0)
        assert normal_absolute_moment(2, 2) == pytest.approx(2.0)
        assert normal_absolute_moment(3, 4) == pytest.approx(15.0)

    def test_odd_moment_rejected(self):
        with pytest.raises(OddMomentUnsupported):
            absolute_moment(GaussianMeasure([0.0], [[1.0]]), 3)

    def test_zero_moment(self):
        assert absolute_moment(GaussianMeasure([0.0], [[1.0]]), 0) == 1.0


class TestSchemeParsing:
    def test_round_trip(self):
        assert parse_scheme("gh:12") == GaussHermite(12)
        assert str(parse_scheme("mc:500:9")) == "mc:500:9"

    @pytest.mark.parametrize("text", ["gh", "gh:x", "simpson:3"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_scheme(text)
