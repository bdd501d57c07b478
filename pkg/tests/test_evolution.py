import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ouevolve import EvolutionOperator, GaussHermite, MonteCarlo, WeightSpec, builtin
from ouevolve import bank
from ouevolve.errors import MissingDerivatives, QuadratureOverflow, SingularCovariance
from ouevolve.weights import WeightedFunction

# 30-digit quadrature of E tanh(U x + Q^{1/2} Z) and its first two
# x-derivatives for the periodic model, s = 0.3, t = 1.7, x = 0.4
PERIODIC_TANH = 0.00716981003945701164781154161469
PERIODIC_TANH_D1 = 0.0179239683814337781265611320294
PERIODIC_TANH_D2 = -0.00000417528789217575862546757577782

def tanh_field():
    def d1(y):
        return (1.0 / np.cosh(y) ** 2).reshape(len(y), 1)

    def d2(y):
        return (-2.0 * np.tanh(y) / np.cosh(y) ** 2).reshape(len(y), 1, 1)

    return WeightedFunction(lambda y: np.tanh(y[:, 0]), WeightSpec(), (d1, d2), 1, "tanh")


@pytest.fixture(scope="module")
def periodic():
    # tight flow tolerance, so the comparison measures the quadrature alone
    return EvolutionOperator(builtin("periodic"), flow_tol=1e-13)


class TestValues:
    def test_periodic_oracle(self, periodic):
        assert periodic.apply(tanh_field(), 0.3, 1.7, [0.4]) == pytest.approx(PERIODIC_TANH, abs=1e-12)

    @pytest.mark.parametrize("method", ["kernel", "direct", "transfer"])
    def test_periodic_oracle_derivatives(self, periodic, method):
        f = tanh_field()
        x = np.array([[0.4]])
        assert periodic.gradient(f, 0.3, 1.7, x, method)[0, 0] == pytest.approx(PERIODIC_TANH_D1, abs=1e-11)
        assert periodic.hessian(f, 0.3, 1.7, x, method)[0, 0, 0] == pytest.approx(PERIODIC_TANH_D2, abs=1e-11)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(1e-3, 3.0), st.floats(-5.0, 5.0))
    def test_heat_cosine(self, d, x):
        op = EvolutionOperator(builtin("heat"))
        assert op.apply(bank.get("cos"), 1.0, 1.0 + d, [x]) == pytest.approx(math.exp(-d) * math.cos(x), abs=1e-13)

    def test_identity_at_zero_lag(self):
        op = EvolutionOperator(builtin("ou1"))
        x = np.array([[0.3], [1.2]])
        assert np.array_equal(op.apply(bank.get("wave"), 0.5, 0.5, x), bank.get("wave")(x))

    def test_point_and_batch_shapes(self):
        op = EvolutionOperator(builtin("rotation"))
        f = bank.get("bump", 2)
        assert np.ndim(op.apply(f, 0.0, 1.0, [0.1, 0.2])) == 0
        assert op.apply(f, 0.0, 1.0, np.zeros((3, 2))).shape == (3,)
        assert op.hessian(f, 0.0, 1.0, [0.1, 0.2]).shape == (2, 2)
        assert op.third_derivs(f, 0.0, 1.0, np.zeros((3, 2))).shape == (3, 2, 2, 2)

    def test_one_dimensional_vector_is_a_batch(self):
        op = EvolutionOperator(builtin("ou1"))
        assert op.apply(bank.get("cos"), 0.0, 1.0, [0.1, 0.2, 0.3]).shape == (3,)

    def test_monte_carlo_within_four_sigma(self):
        op = EvolutionOperator(builtin("heat"), scheme=MonteCarlo(40_000, 2))
        x = np.array([[0.0], [1.0]])
        value, err = op.apply_with_error(bank.get("cos"), 0.0, 0.5, x)
        exact = math.exp(-0.5) * np.cos(x[:, 0])
        assert np.all(np.abs(value - exact) <= 4.0 * err)

    def test_flow_cache_is_reused(self):
        op = EvolutionOperator(builtin("periodic"))
        op.prefetch(0.0, [0.5, 1.0])
        assert op.flow(0.0, 0.5) is op.flow(0.0, 0.5)


class TestProperties:
    @settings(max_examples=20, deadline=None)
    @given(st.floats(-4.0, 4.0), st.floats(1e-2, 2.0))
    def test_positivity_and_contraction(self, x, d):
        op = EvolutionOperator(builtin("periodic"))
        f = bank.get("bump")
        v = op.apply(f, 0.0, d, [x])
        assert 0.0 < v <= 1.0

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.1, 0.9))
    def test_chapman_kolmogorov(self, frac):
        op = EvolutionOperator(builtin("periodic"))
        x = np.linspace(-3.0, 3.0, 7)[:, None]
        assert op.compose_check(bank.get("wave"), 0.0, frac * 1.5, 1.5, x) <= 1e-10

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 100))
    def test_linearity(self, seed):
        op = EvolutionOperator(builtin("ou1"))
        f, g = bank.random_smooth(1, seed), bank.random_smooth(1, seed + 1)
        x = np.linspace(-2.0, 2.0, 5)[:, None]
        both = WeightedFunction(lambda y: 2.0 * f.f(y) - g.f(y))
        expect = 2.0 * op.apply(f, 0.0, 0.7, x) - op.apply(g, 0.0, 0.7, x)
        assert np.allclose(op.apply(both, 0.0, 0.7, x), expect, atol=1e-13)


class TestDerivativeRoutes:
    @pytest.mark.parametrize("order", [1, 2, 3])
    @pytest.mark.parametrize("name", ["cos", "wave", "bump", "weighted_wave"])
    def test_routes_agree_1d(self, order, name):
        op = EvolutionOperator(builtin("periodic"), inner_scheme=GaussHermite(20))
        f = bank.get(name)
        x = np.array([[-1.3], [0.2], [2.1]])
        ref = op.derivative(f, 0.2, 1.1, x, order, "transfer")
        for method in ("kernel", "direct", "auto"):
            got = op.derivative(f, 0.2, 1.1, x, order, method)
            assert np.allclose(got, ref, rtol=1e-7, atol=1e-9), method

    @pytest.mark.parametrize("order", [1, 2])
    def test_routes_agree_2d(self, order):
        op = EvolutionOperator(builtin("rotation"), scheme=GaussHermite(24))
        f = bank.get("wave", 2)
        x = np.array([[0.3, -0.6], [1.0, 0.5]])
        ref = op.derivative(f, 0.0, 0.8, x, order, "transfer")
        for method in ("kernel", "direct"):
            assert np.allclose(op.derivative(f, 0.0, 0.8, x, order, method), ref, atol=1e-10)

    def test_rotation_square_hessian(self):
        op = EvolutionOperator(builtin("rotation"))
        st_ = op.flow(0.0, 1.3)
        H = op.hessian(bank.get("square", 2).f, 0.0, 1.3, np.array([[0.4, -0.2]]), "kernel")[0]
        assert np.allclose(H, 2.0 * st_.U.T @ st_.U, atol=1e-9)

    def test_heat_third_derivative(self):
        op = EvolutionOperator(builtin("heat"), inner_scheme=GaussHermite(12))
        x = np.array([[0.7]])
        got = op.third_derivs(bank.get("cos").f, 0.0, 0.4, x, "kernel")[0, 0, 0, 0]
        assert got == pytest.approx(math.exp(-0.4) * math.sin(0.7), abs=1e-10)

    def test_hessians_are_symmetric(self):
        op = EvolutionOperator(builtin("rotation"), scheme=GaussHermite(20))
        H = op.hessian(bank.get("bump", 2).f, 0.0, 0.6, np.array([[0.2, 0.9]]), "kernel")[0]
        assert np.array_equal(H, H.T)


class TestErrors:
    def test_singular_floor(self):
        op = EvolutionOperator(builtin("ou1"))
        with pytest.raises(SingularCovariance):
            op.gradient(bank.get("cos"), 0.0, 1e-8, [0.0])

    def test_values_allowed_below_floor(self):
        op = EvolutionOperator(builtin("ou1"))
        assert op.apply(bank.get("cos"), 0.0, 1e-8, [0.0]) == pytest.approx(1.0, abs=1e-7)

    def test_reversed_interval(self):
        with pytest.raises(ValueError):
            EvolutionOperator(builtin("ou1")).apply(bank.get("cos"), 1.0, 0.0, [0.0])

    def test_transfer_needs_derivatives(self):
        with pytest.raises(MissingDerivatives):
            EvolutionOperator(builtin("ou1")).hessian(bank.get("soft_step"), 0.0, 1.0, [0.0], "transfer")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            EvolutionOperator(builtin("ou1")).gradient(bank.get("cos"), 0.0, 1.0, [0.0], "magic")

    def test_overflow(self):
        op = EvolutionOperator(builtin("expanding"))
        with pytest.raises(QuadratureOverflow):
            op.apply(lambda y: np.exp(np.exp(y[:, 0])), 0.0, 3.0, [1.0])


@pytest.fixture(scope="module")
def setup():
    op = EvolutionOperator(builtin("ou1"))
    return op, bank.get("wave"), np.linspace(-2.0, 2.0, 5)[:, None]


class TestTruncation:
    def test_profile_matches_single_truncation(self, setup):
        op, f, x = setup
        profile = op.truncation_profile(f, 0.0, 1.0, 0.5, [1.0, 3.0], x)
        assert np.allclose(profile[0], op.truncated(f, 0.0, 1.0, 0.5, 1.0, x), atol=1e-14)

    def test_large_radius_recovers_operator(self, setup):
        op, f, x = setup
        profile = op.truncation_profile(f, 0.0, 1.0, 0.5, [100.0], x)
        assert np.allclose(profile[0], op.apply(f, 0.0, 1.0, x), atol=1e-12)

    def test_tail_majorises_defect(self, setup):
        op, f, x = setup
        defect = np.abs(op.truncated(f, 0.0, 1.0, 0.5, 1.5, x) - op.apply(f, 0.0, 1.0, x))
        assert np.all(defect <= op.tail(f, 0.0, 1.0, 0.5, 1.5, x) + 1e-13)
