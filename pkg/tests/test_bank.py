import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ouevolve import bank
from ouevolve.coeffs import WeightSpec
from ouevolve.errors import ConfigError
from ouevolve.weights import weighted_sup_norm

WEIGHTS = [WeightSpec.polynomial(1), WeightSpec.exponential(0.5)]


def central(fn, x, h):
    n = x.shape[1]
    return np.stack([(fn(x + h * e) - fn(x - h * e)) / (2.0 * h) for e in np.eye(n)], axis=-1)


def check_chain(f, x):
    """Each exact derivative is the difference quotient of the previous one."""
    for k in range(f.exact_order()):
        fd = central(lambda y: f.derivative(y, k), x, 1e-5)
        exact = f.derivative(x, k + 1)
        assert np.allclose(fd, exact, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(exact).max()))


class TestDerivatives:
    @pytest.mark.parametrize("name", bank.SMOOTH)
    @pytest.mark.parametrize("weight", WEIGHTS, ids=str)
    @settings(max_examples=10, deadline=None)
    @given(n=st.integers(1, 3), seed=st.integers(0, 1000))
    def test_smooth_entries(self, name, weight, n, seed):
        x = np.random.default_rng(seed).uniform(-2.0, 2.0, (4, n))
        f = bank.get(name, n, weight)
        assert f.exact_order() == 3
        check_chain(f, x)

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(1, 3), seed=st.integers(0, 1000))
    def test_random_smooth(self, n, seed):
        x = np.random.default_rng(seed + 1).uniform(-2.0, 2.0, (4, n))
        check_chain(bank.random_smooth(n, seed), x)

    def test_random_smooth_is_reproducible(self):
        x = np.linspace(-1.0, 1.0, 5)[:, None]
        assert np.array_equal(bank.random_smooth(1, 4)(x), bank.random_smooth(1, 4)(x))
        assert not np.array_equal(bank.random_smooth(1, 4)(x), bank.random_smooth(1, 5)(x))

    def test_kink_exposes_first_derivative_only(self):
        f = bank.get("kink")
        assert f.exact_order() == 1
        x = np.array([[-0.3], [0.0], [0.2]])
        assert f(x)[1] == 0.0
        assert np.allclose(f(x[::2]), np.abs(x[::2, 0]) - np.log(2.0) * bank.ROUGH_SCALE, rtol=0, atol=1e-15)
        assert np.array_equal(f.derivative(x, 1)[:, 0], np.tanh(x[:, 0] / bank.ROUGH_SCALE))


class TestGroups:
    def test_unit_ball_members(self):
        for weight in (WeightSpec.polynomial(1), WeightSpec.polynomial(2)):
            for f in bank.bank(bank.UNIT_BALL, 2, weight):
                assert weighted_sup_norm(f, R=10.0, n=64).value <= 1.0 + 1e-12, f.name

    def test_groups_are_registered(self):
        for name in bank.SMOOTH + bank.UNIT_BALL + bank.SMOOTH_BOUNDED:
            assert name in bank.BANK

    def test_unknown_name(self):
        with pytest.raises(ConfigError) as exc:
            bank.get("nope")
        assert exc.value.field == "f"

    def test_names_are_set(self):
        assert [f.name for f in bank.bank(("cos", "bump"))] == ["cos", "bump"]
