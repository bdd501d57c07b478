import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ouevolve import EvolutionOperator, GaussHermite, WeightSpec, builtin
from ouevolve import bank
from ouevolve.cauchy import (
    CauchyProblem,
    HypothesisWarning,
    MildSolver,
    apply_L,
    crank_nicolson,
    graded_panels,
    graded_rule,
    residual,
    schauder_ratio,
    solve,
    solve_homogeneous,
)
from ouevolve.errors import MissingDerivatives
from ouevolve.weights import WeightedFunction

POLY = WeightSpec.polynomial(1)
# 30-digit value of E tanh(U x + Q^{1/2} Z), periodic model, s = 0.3, T = 1.7, x = 0.4
PERIODIC_TANH = 0.00716981003945701164781154161469

X = np.linspace(-3.0, 3.0, 7)[:, None]


def problem(model="ou1", phi="cos", source=None, a=0.0, T=1.0, weight=POLY):
    m = builtin(model) if isinstance(model, str) else model
    return CauchyProblem(m, weight, a, T, bank.get(phi, m.dimension, weight), source)


class TestClosedForms:
    def test_constant_source(self):
        one = bank.get("one")
        pb = CauchyProblem(builtin("periodic"), POLY, 0.0, 2.0, one.scaled(0.0), lambda r: one)
        ms = solve(pb, [0.0, 0.5, 2.0], X, derivatives=1)
        assert np.allclose(ms.values, (2.0 - ms.times)[:, None], atol=1e-12)
        assert np.allclose(ms.gradient, 0.0, atol=1e-12)

    def test_linear_source(self):
        # P_{s,r} y = e^{-(r-s)} x for ou1, so u = (1 - e^{-(T-s)}) x
        lin = bank.get("linear")
        pb = CauchyProblem(builtin("ou1"), POLY, 0.0, 1.0, lin.scaled(0.0), lambda r: lin)
        ms = solve(pb, [0.0, 0.6], X, derivatives=2)
        expected = (1.0 - np.exp(-(1.0 - ms.times)))[:, None] * X[:, 0][None, :]
        assert np.allclose(ms.values, expected, atol=1e-12)
        assert np.allclose(ms.hessian, 0.0, atol=1e-12)

    def test_heat_cosine_with_matching_source(self):
        # phi = f = cos on the heat model gives u = cos for every s
        cos = bank.get("cos")
        pb = CauchyProblem(builtin("heat"), POLY, 0.0, 1.0, cos, lambda r: cos)
        ms = solve(pb, [0.0, 0.3], X, derivatives=2)
        assert np.allclose(ms.values, np.cos(X[:, 0])[None, :], atol=1e-12)
        assert np.allclose(ms.hessian[..., 0, 0], -np.cos(X[:, 0])[None, :], atol=1e-11)

    def test_periodic_oracle(self):
        tanh = WeightedFunction(lambda y: np.tanh(y[:, 0]), POLY, (), 1)
        pb = CauchyProblem(builtin("periodic"), POLY, 0.3, 1.7, tanh)
        op = EvolutionOperator(pb.model, POLY, flow_tol=1e-13)
        assert MildSolver(pb, op).value(0.3, [[0.4]])[0] == pytest.approx(PERIODIC_TANH, abs=1e-12)

    def test_terminal_value(self):
        pb = problem("periodic", "wave")
        ms = solve(pb, [1.0], X, derivatives=0)
        assert np.array_equal(ms.values[0], pb.phi(X))


class TestResidual:
    def test_second_order_in_step(self):
        f = bank.random_smooth(1, 3)
        pb = CauchyProblem(builtin("periodic"), POLY, 0.0, 1.0, bank.random_smooth(1, 2), lambda r: f.scaled(math.cos(r)))
        res = [residual(solve(pb, [0.5], X, h_s=h)) for h in (0.04, 0.02)]
        assert res[1] <= 10.0 * 0.02**2
        assert 3.0 < res[0] / res[1] < 5.0

    def test_apply_L_on_quadratic(self):
        # L |y|^2 = Tr Q + 2 <A x, x> for h = 0
        m = builtin("periodic", dimension=2)
        x = np.array([[1.0, 2.0]])
        got = apply_L(m, 0.4, bank.get("square", 2), x)[0]
        assert got == pytest.approx(2.0 + 2.0 * (-(2.0 + math.sin(0.4))) * 5.0)

    def test_apply_L_needs_derivatives(self):
        with pytest.raises(MissingDerivatives):
            apply_L(builtin("ou1"), 0.0, bank.get("soft_step"), X)

    def test_residual_needs_step(self):
        with pytest.raises(ValueError):
            residual(solve(problem(), [0.5], X, derivatives=0))

    def test_boundary_times_excluded(self):
        ms = solve(problem(), [0.0, 0.5, 1.0], X, h_s=0.01)
        assert np.all(np.isnan(ms.residual_field[[0, 2]]))
        assert np.all(np.isfinite(ms.residual_field[1]))


class TestMesh:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2.0, 2.0), st.floats(1e-3, 5.0), st.integers(1, 12))
    def test_rule_integrates_polynomials(self, s, L, levels):
        nodes, weights = graded_rule(s, s + L, levels)
        assert weights.sum() == pytest.approx(L, rel=1e-12)
        assert np.all((nodes > s) & (nodes < s + L))
        assert weights @ (nodes - s) ** 5 == pytest.approx(L**6 / 6.0, rel=1e-10)

    def test_panels_halve_towards_start(self):
        edges = graded_panels(0.0, 1.0, levels=4)
        assert np.allclose(np.diff(edges), [1 / 16, 1 / 16, 1 / 8, 1 / 4, 1 / 2])

    def test_panel_floor(self):
        edges = graded_panels(0.0, 1e-5, levels=12, floor=1e-6)
        assert np.diff(edges).min() >= 1e-6


class TestProblem:
    def test_validation(self):
        with pytest.raises(ValueError):
            problem(a=1.0, T=1.0)
        with pytest.raises(ValueError):
            CauchyProblem(builtin("ou1"), POLY, 0.0, 1.0, bank.get("cos"), theta=1.0)

    def test_scaling_is_linear(self):
        f = bank.get("wave")
        pb = CauchyProblem(builtin("ou1"), POLY, 0.0, 1.0, bank.get("cos"), lambda r: f)
        base = solve(pb, [0.2], X, derivatives=1)
        scaled = solve(pb.scaled(-3.0), [0.2], X, derivatives=1)
        assert np.allclose(scaled.values, -3.0 * base.values, rtol=1e-13, atol=1e-14)
        assert np.allclose(scaled.gradient, -3.0 * base.gradient, rtol=1e-13, atol=1e-14)

    def test_solution_is_read_only(self):
        ms = solve(problem(), [0.5], X, derivatives=0)
        with pytest.raises(ValueError):
            ms.values[0, 0] = 1.0

    def test_homogeneous_rejects_source(self):
        with pytest.raises(ValueError):
            solve_homogeneous(problem(source=lambda r: bank.get("one")), [0.5], X)

    def test_diagnostics(self):
        ms = solve(problem(), [0.5], X, h_s=0.01)
        assert ms.diagnostics["quad"] == "gh:40"
        assert ms.diagnostics["consistency_scale"] == pytest.approx(1e-4)

    def test_hypothesis_warning_for_exponential_weight(self):
        with pytest.warns(HypothesisWarning):
            solver = MildSolver(problem("expanding", weight=WeightSpec.exponential(0.5)))
        assert solver.diagnostics["negative_definite_drift"] is False

    def test_no_warning_for_contracting_drift(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error", HypothesisWarning)
            MildSolver(problem("ou1", weight=WeightSpec.exponential(0.5)))


class TestSchauder:
    def test_ratio_is_scale_invariant(self):
        f = bank.random_smooth(1, 7)
        pb = CauchyProblem(builtin("ou1"), POLY, 0.0, 1.0, bank.random_smooth(1, 8), lambda r: f)
        kw = dict(R=5.0, n=16, pair_budget=500, op=EvolutionOperator(pb.model, POLY, GaussHermite(20)), levels=3, order=6)
        base = schauder_ratio(pb, [0.0, 1.0], **kw)
        scaled = schauder_ratio(pb.scaled(1e3), [0.0, 1.0], **kw)
        assert math.isfinite(base.ratio) and base.ratio > 0.0
        assert scaled.ratio == pytest.approx(base.ratio, rel=1e-12)


class TestFiniteDifferences:
    def test_crank_nicolson_heat_cosine(self):
        pb = problem("heat", "cos")
        exact = lambda s: (math.exp(-(1.0 - s)) * math.cos(-6.0),) * 2  # noqa: E731
        times, x, u = crank_nicolson(pb, 6.0, nx=301, nt=80, boundary=exact)
        assert times[0] == 1.0 and times[-1] == 0.0
        err = np.abs(u[-1] - math.exp(-1.0) * np.cos(x)).max()
        assert err <= 1e-3

    def test_two_dimensional_rejected(self):
        with pytest.raises(ValueError):
            crank_nicolson(problem("rotation", "cos"), 5.0)
