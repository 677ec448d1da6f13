import math

import numpy as np
import pytest

from cavident.inversion import EpsilonSchedule
from cavident.presets import (
    PRESETS,
    TractionParseError,
    get_preset,
    parse_traction_expression,
    preset_table,
)


class TestParser:
    def test_affine_pair(self):
        g = parse_traction_expression("(0, 1/10 - 3/10*y)")
        out = g(np.array([[0.0, 1.0]]))
        assert np.allclose(out, [[0.0, -0.2]], atol=1e-15)

    def test_swap_with_signs(self):
        g = parse_traction_expression("(-y, -x)")
        out = g(np.array([[0.5, -0.5]]))
        assert np.allclose(out, [[0.5, -0.5]], atol=1e-15)

    def test_linear_scaling(self):
        g = parse_traction_expression("(5*x, 4*y)")
        out = g(np.array([[0.2, -0.3], [1.0, 1.0]]))
        assert np.allclose(out, [[1.0, -1.2], [5.0, 4.0]], atol=1e-15)

    def test_caret_power(self):
        g = parse_traction_expression("(-1/2*x^2, y^2)")
        out = g(np.array([[2.0, 3.0]]))
        assert np.allclose(out, [[-2.0, 9.0]], atol=1e-15)

    def test_pi_constant(self):
        g = parse_traction_expression("(pi, pi/2)")
        out = g(np.array([[0.0, 0.0]]))
        assert np.allclose(out, [[math.pi, math.pi / 2]], rtol=1e-16)

    def test_rational_constants_are_exact(self):
        g = parse_traction_expression("(1/10, 3/10)")
        out = g(np.array([[0.7, 0.7]]))
        assert out[0, 0] == 0.1
        assert out[0, 1] == 0.3

    def test_vectorized_over_points(self, rng):
        g = parse_traction_expression("(x*y, x - y^2)")
        pts = rng.uniform(-1.0, 1.0, size=(40, 2))
        out = g(pts)
        assert np.allclose(out[:, 0], pts[:, 0] * pts[:, 1], atol=1e-15)
        assert np.allclose(out[:, 1], pts[:, 0] - pts[:, 1] ** 2, atol=1e-15)

    def test_expression_attribute(self):
        g = parse_traction_expression("(x, y)")
        assert g.expression == "(x, y)"

    def test_rejects_non_pair(self):
        with pytest.raises(TractionParseError, match="pair"):
            parse_traction_expression("x + y")
        with pytest.raises(TractionParseError, match="pair"):
            parse_traction_expression("(x, y, 0)")

    def test_rejects_nested_tuple(self):
        with pytest.raises(TractionParseError, match="nested"):
            parse_traction_expression("((x, y), 0)")

    def test_rejects_unknown_name(self):
        with pytest.raises(TractionParseError, match="unknown name 'z'"):
            parse_traction_expression("(z, 0)")

    def test_rejects_calls(self):
        with pytest.raises(TractionParseError):
            parse_traction_expression("(sin(x), 0)")

    def test_rejects_comparison(self):
        with pytest.raises(TractionParseError):
            parse_traction_expression("(x < y, 0)")

    def test_rejects_division_by_zero(self):
        with pytest.raises(TractionParseError, match="division by zero"):
            parse_traction_expression("(1/0, 0)")

    def test_syntax_error_carries_position(self):
        with pytest.raises(TractionParseError) as info:
            parse_traction_expression("(x + , y)")
        assert info.value.position is not None
        assert "column" in str(info.value)


EXPECTED = {
    # name: (mu, lam, delta, alpha_tilde, tau, epsilon, refine_period,
    #        schedule, noise_level, tractions)
    "test1": (0.2, 1.0, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 1000, None, 0.0,
              ("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test2a": (1.0, 1.0, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 1500, None, 0.0,
               ("(2, 0)", "(-1/2*x^2, y^2)")),
    "test2b": (0.5, 1.0, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 1000, None, 0.0,
               ("(x, y)", "(-y, -x)")),
    "test2c": (2.0, -0.2, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 2000, None, 0.0,
               ("(5*x, 4*y)", "(-3*y, -3*x)")),
    "test3a": (0.5, 1.0, 1e-2, 1e-2, 1e-3, 1 / (8 * math.pi), 6000, None, 0.0,
               ("(1/10, 0)", "(-1/2*x^2, y^2)")),
    "test3b": (0.5, 1.0, 1e-2, 5e-2, 1e-3, 1 / (8 * math.pi), 6000, None, 0.0,
               ("(1/10, 0)", "(-1/2*x^2, y^2)")),
    "test3c": (0.5, 1.0, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 3000, None, 0.0,
               ("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test4a": (0.5, 1.0, 1e-2, 1e-2, 1e-3, 1 / (16 * math.pi), 5000, None, 0.0,
               ("(x, y)", "(-y, -x)")),
    "test4b": (0.5, 1.0, 7.5e-2, 1e-2, 1e-3, 1 / (4 * math.pi), 5000,
               (8000, 4.0), 0.0, ("(x, y)", "(-y, -x)")),
    "test5": (0.5, 1.0, 1e-2, 1e-2, 5e-4, 1 / (16 * math.pi), 5000, None, 0.0,
              ("(x, y)", "(-y, -x)")),
    "test6a": (0.2, 1.0, 1e-2, 1e-2, 5e-4, 1 / (16 * math.pi), 2000, None, 2.0,
               ("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test6b": (0.2, 1.0, 1e-2, 5e-2, 5e-4, 1 / (16 * math.pi), 2500, None, 5.0,
               ("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test6c": (0.5, 1.0, 1e-2, 1e-2, 5e-4, 1 / (16 * math.pi), 3000, None, 2.0,
               ("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test6d": (0.5, 1.0, 1e-2, 1e-2, 5e-4, 1 / (16 * math.pi), 10000, None, 5.0,
               ("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)")),
    "test6e": (0.5, 1.0, 7.5e-2, 1e-2, 1e-3, 1 / (4 * math.pi), 5000,
               (8000, 4.0), 2.0, ("(x, y)", "(-y, -x)")),
    "test6f": (0.5, 1.0, 7.5e-2, 1e-2, 5e-4, 1 / (4 * math.pi), 8000,
               (10000, 4.0), 5.0, ("(x, y)", "(-y, -x)")),
}


class TestPresetTable:
    def test_names(self):
        assert set(PRESETS) == set(EXPECTED)

    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_parameters(self, name):
        mu, lam, delta, at, tau, eps, period, sched, noise, tractions = EXPECTED[name]
        row = {r["name"]: r for r in preset_table()}[name]
        assert row["mu"] == mu
        assert row["lam"] == lam
        assert row["delta"] == delta
        assert row["alpha_tilde"] == at
        assert row["tau"] == tau
        assert row["epsilon"] == eps
        assert row["refine_period"] == period
        assert row["epsilon_schedule"] == sched
        assert row["noise_level"] == noise
        assert row["tractions"] == tractions

    def test_targets_described(self):
        for row in preset_table():
            assert isinstance(row["target"], str) and row["target"]


class TestPreset:
    def test_config_carries_parameters(self):
        preset = get_preset("test4b")
        config = preset.config()
        assert config.mu == preset.mu
        assert config.delta == preset.delta
        assert config.epsilon == preset.epsilon
        assert config.epsilon_schedule == EpsilonSchedule(8000, 4.0)
        assert config.refine_period == preset.refine_period

    def test_config_overrides(self):
        config = get_preset("test1").config(resolution=16, max_iterations=50)
        assert config.resolution == 16
        assert config.max_iterations == 50
        assert config.tau == 1e-3

    def test_load_definitions_ids(self):
        loads = get_preset("test1").load_definitions()
        assert [i for i, _ in loads] == [1, 2]
        g1 = loads[0][1]
        assert np.allclose(g1([[0.0, 1.0]]), [[0.0, -0.2]])

    def test_noise_helper(self):
        assert get_preset("test1").noise() is None
        spec = get_preset("test6a").noise(seed=3)
        assert spec.level == 2.0
        assert spec.seed == 3

    def test_unknown_name(self):
        with pytest.raises(KeyError, match="test1"):
            get_preset("nope")
