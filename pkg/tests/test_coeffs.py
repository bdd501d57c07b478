import json
import math

import numpy as np
import pytest

from ouevolve.coeffs import (
    BUILTIN_MODELS,
    DeclaredBounds,
    SamplePlan,
    WeightSpec,
    builtin,
    constant_model,
    model_from_json,
    tabulated_model,
    validate_hypotheses,
)
from ouevolve.errors import ConfigError, DomainError, NonSymmetricQ


class TestBuiltins:
    @pytest.mark.parametrize("name", BUILTIN_MODELS)
    def test_shapes(self, name):
        m = builtin(name)
        n = m.dimension
        assert m.A_at(0.3).shape == (n, n)
        assert m.Q_at(0.3).shape == (n, n)
        assert m.h_at(0.3).shape == (n,)

    def test_periodic_drift(self):
        m = builtin("periodic", dimension=2)
        assert np.allclose(m.A_at(1.0), -(2.0 + math.sin(1.0)) * np.eye(2))

    def test_rotation_is_two_dimensional(self):
        assert builtin("rotation").dimension == 2
        with pytest.raises(ConfigError):
            builtin("rotation", dimension=3)

    def test_unknown_name(self):
        with pytest.raises(ConfigError) as exc:
            builtin("nope")
        assert exc.value.field == "model"

    def test_diffusion_override(self):
        assert builtin("ou1", diffusion=0.5).Q_at(0.0)[0, 0] == 0.5

    def test_time_domain_enforced(self):
        m = builtin("ou1", time_domain=(0.0, 1.0))
        with pytest.raises(DomainError):
            m.A_at(1.5)

    def test_returned_arrays_are_copies(self):
        m = builtin("ou1")
        m.A_at(0.0)[0, 0] = 99.0
        assert m.A_at(0.0)[0, 0] == -1.0


class TestWeightSpec:
    def test_values(self):
        x = np.array([[3.0, 4.0]])
        assert WeightSpec.polynomial(2)(x)[0] == 1.0 + 25.0**2
        assert WeightSpec.exponential(0.5)(x)[0] == pytest.approx(math.exp(math.sqrt(26.0)))

    @pytest.mark.parametrize("text, expected", [("poly:3", WeightSpec.polynomial(3)), ("exp:1/4", WeightSpec.exponential(0.25))])
    def test_parse_round_trip(self, text, expected):
        w = WeightSpec.parse(text)
        assert w == expected
        assert WeightSpec.parse(str(w)) == w

    @pytest.mark.parametrize("text", ["poly:0", "exp:0.7", "cubic:2", "poly:x"])
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigError):
            WeightSpec.parse(text)


class TestConstruction:
    def test_constant_model_shape_check(self):
        with pytest.raises(ValueError):
            constant_model(np.eye(2), np.eye(3))

    def test_tabulated_interpolates(self):
        times = [0.0, 1.0, 2.0]
        A = [[[-1.0]], [[-3.0]], [[-2.0]]]
        Q = [[[1.0]]] * 3
        m = tabulated_model(times, A, Q)
        assert m.A_at(0.5)[0, 0] == pytest.approx(-2.0)
        assert m.A_at(1.5)[0, 0] == pytest.approx(-2.5)
        assert m.time_domain == (0.0, 2.0)

    def test_json_round_trip(self, tmp_path):
        m = constant_model([[-1.0, 0.2], [0.0, -2.0]], np.eye(2), [0.1, 0.0])
        path = tmp_path / "model.json"
        path.write_text(json.dumps(m.source))
        back = model_from_json(str(path))
        assert np.array_equal(back.A_at(0.0), m.A_at(0.0))
        assert np.array_equal(back.h_at(0.0), m.h_at(0.0))

    def test_json_builtin_by_name(self):
        assert model_from_json('{"name": "periodic", "dimension": 2}').dimension == 2

    def test_json_missing_field(self):
        with pytest.raises(ConfigError) as exc:
            model_from_json({"type": "constant", "A": [[1.0]]})
        assert exc.value.field == "model.Q"

    def test_json_syntax_error_has_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            model_from_json('{\n "type": }')


class TestHypotheses:
    def test_ou1_passes_for_exponential_weight(self):
        report = validate_hypotheses(builtin("ou1"), WeightSpec.exponential(0.5), SamplePlan(n_times=32))
        assert report.passed
        assert "contraction" in report and "negative_definite_drift" in report

    def test_polynomial_weight_skips_contraction(self):
        report = validate_hypotheses(builtin("expanding"), WeightSpec.polynomial(1), SamplePlan(n_times=16))
        assert report.passed
        assert "contraction" not in report

    def test_expanding_fails_for_exponential_weight(self):
        report = validate_hypotheses(builtin("expanding"), WeightSpec.exponential(0.5), SamplePlan(n_times=16))
        assert not report["contraction"].passed
        assert not report["negative_definite_drift"].passed
        assert report["negative_definite_drift"].witness is not None

    def test_non_symmetric_q(self):
        m = constant_model([[-1.0, 0.0], [0.0, -1.0]], [[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(NonSymmetricQ):
            validate_hypotheses(m, None, SamplePlan(n_times=4))

    def test_declared_ellipticity_violation_has_witness(self):
        m = constant_model([[-1.0]], [[0.5]], declared=DeclaredBounds(C_ell=1.0))
        check = validate_hypotheses(m, None, SamplePlan(n_times=4))["ellipticity"]
        assert not check.passed
        assert check.value == pytest.approx(0.5)

    def test_measured_bounds_inflate(self):
        b = builtin("periodic").measured_bounds(np.linspace(-5.0, 5.0, 101))
        assert b.A_inf >= 3.0
        assert b.C_ell < 1.0
