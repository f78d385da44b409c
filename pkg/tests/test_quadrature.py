import math

import numpy as np
import pytest
from scipy.integrate import quad

from fraclap.quadrature import (adaptive_edge_rule, gauss_interval, gauss_simplex,
                                gauss_triangle, singular_pair_rule)
from oracles import PairOracle


def _tri_monomial(a, b):
    # int_T x^a y^b over the reference triangle
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


class TestGaussInterval:
    def test_midpoint(self):
        r = gauss_interval(1)
        assert r.points[0, 0] == 0.5 and r.weights[0] == 1.0
        assert r.exactness_degree == 1

    def test_cubic(self):
        assert abs(gauss_interval(2).integrate(lambda p: p[:, 0] ** 3) - 0.25) <= 1e-15

    def test_ninth_power(self):
        assert abs(gauss_interval(5).integrate(lambda p: p[:, 0] ** 9) - 0.1) <= 1e-14

    @pytest.mark.parametrize("order", range(1, 31))
    def test_exact_up_to_degree(self, order):
        r = gauss_interval(order)
        assert r.exactness_degree == 2 * order - 1
        assert abs(r.weights.sum() - 1.0) <= 1e-14
        assert np.all(r.weights > 0)
        for k in range(r.exactness_degree + 1):
            assert r.integrate(lambda p: p[:, 0] ** k) == pytest.approx(1 / (k + 1), rel=1e-13)

    @pytest.mark.parametrize("order", [0, 31])
    def test_out_of_range(self, order):
        with pytest.raises(ValueError):
            gauss_interval(order)


class TestGaussTriangle:
    def test_centroid(self):
        r = gauss_triangle(1)
        np.testing.assert_allclose(r.points, [[1 / 3, 1 / 3]])
        assert r.weights[0] == 0.5

    def test_linear(self):
        assert abs(gauss_triangle(2).integrate(lambda p: p[:, 0]) - 1 / 6) <= 1e-15

    def test_x2y(self):
        assert abs(gauss_triangle(4).integrate(lambda p: p[:, 0] ** 2 * p[:, 1]) - 1 / 60) <= 1e-14

    @pytest.mark.parametrize("order", range(1, 21))
    def test_exact_up_to_order(self, order):
        r = gauss_triangle(order)
        assert r.exactness_degree >= order
        assert abs(r.weights.sum() - 0.5) <= 1e-14
        assert np.all(r.weights > 0)
        pts = r.points
        for a in range(order + 1):
            for b in range(order + 1 - a):
                val = r.integrate(lambda p: p[:, 0] ** a * p[:, 1] ** b)
                assert val == pytest.approx(_tri_monomial(a, b), rel=1e-13)
        assert np.all(pts >= 0) and np.all(pts.sum(axis=1) <= 1)

    @pytest.mark.parametrize("order", [0, 21])
    def test_out_of_range(self, order):
        with pytest.raises(ValueError):
            gauss_triangle(order)

    def test_simplex_dispatch(self):
        assert gauss_simplex(1, 5).exactness_degree >= 5
        assert gauss_simplex(2, 7).exactness_degree >= 7
        with pytest.raises(ValueError):
            gauss_simplex(3, 2)


def _identical_1d(s, order, radial=None):
    r = singular_pair_rule("identical", order, s, 1, radial_order=radial)
    x, y = r.points_x[:, 0], r.points_y[:, 0]
    return float(r.weights @ ((x - y) ** 2 * np.abs(x - y) ** (-1 - 2 * s)))


class TestSingularPairRule:
    @pytest.mark.parametrize("order", [4, 6, 10])
    def test_identical_1d_half(self, order):
        assert abs(_identical_1d(0.5, order) - 1.0) <= 1e-10

    def test_identical_1d_quarter(self):
        assert abs(_identical_1d(0.25, 6) - 8 / 15) <= 1e-10

    @pytest.mark.parametrize("s", [0.1, 0.5, 0.9])
    def test_identical_1d_general(self, s):
        # int int |x-y|^{1-2s} = 2 / ((2-2s)(3-2s))
        exact = 2.0 / ((2 - 2 * s) * (3 - 2 * s))
        assert _identical_1d(s, 5, radial=1) == pytest.approx(exact, rel=1e-12)

    def test_vertex_1d(self):
        # x in [0,1], y in [-1,0] sharing 0: int int (x-y)^{1-2s}
        s = 0.3
        r = singular_pair_rule("shared-vertex", 12, s, 1)
        x, y = r.points_x[:, 0], -r.points_y[:, 0]
        val = float(r.weights @ np.abs(x - y) ** (1 - 2 * s))
        p = 3 - 2 * s
        exact = (2 ** p - 2) / ((2 - 2 * s) * p)
        assert val == pytest.approx(exact, rel=1e-12)

    def test_shared_vertex_2d_against_oracle(self):
        s = 0.5
        r = singular_pair_rule("shared-vertex", 14, s, 2)
        x, y = r.points_x, -r.points_y  # second triangle is the point reflection
        d = x - y
        val = float(r.weights @ (np.sum(d * d, axis=1) ** -1.5 * d[:, 0] ** 2))
        X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ref = PairOracle(s, 2).pair(X, np.array([[0.0, 1.0, 0.0]]), -X,
                                    np.array([[0.0, -1.0, 0.0]]))[0, 0]
        assert val == pytest.approx(ref, rel=1e-8)

    @pytest.mark.parametrize("case", ["identical", "shared-edge", "shared-vertex"])
    def test_positive_weights_and_points_inside(self, case):
        r = singular_pair_rule(case, 6, 0.4, 2)
        assert np.all(r.weights > 0)
        for P in (r.points_x, r.points_y):
            assert np.all(P >= -1e-15) and np.all(P.sum(axis=1) <= 1 + 1e-15)

    def test_identical_swap_symmetry(self):
        r = singular_pair_rule("identical", 8, 0.3, 2)
        f = lambda x, y: np.exp(x[:, 0] - 2 * y[:, 1]) * np.cos(x[:, 1] + y[:, 0])  # noqa: E731
        a = r.weights @ f(r.points_x, r.points_y)
        b = r.weights @ f(r.points_y, r.points_x)
        assert abs(a - b) <= 1e-14 * abs(a)

    def test_swapped(self):
        r = singular_pair_rule("shared-edge", 4, 0.3, 2)
        sw = r.swapped()
        np.testing.assert_array_equal(sw.points_x, r.points_y)

    @pytest.mark.parametrize("s", [0.25, 0.5])
    def test_error_not_increasing_with_order(self, s):
        exact = 2.0 / ((2 - 2 * s) * (3 - 2 * s))
        errs = [abs(_identical_1d(s, k) - exact) for k in range(4, 12, 2)]
        for a, b in zip(errs, errs[1:]):
            assert b <= max(a, 1e-13)

    @pytest.mark.parametrize("kw", [dict(case="identical", dim=3), dict(case="shared-edge", dim=1),
                                    dict(case="bogus", dim=2)])
    def test_unsupported(self, kw):
        with pytest.raises(ValueError):
            singular_pair_rule(kw["case"], 4, 0.5, kw["dim"])

    @pytest.mark.parametrize("s", [0.0, 1.0, -0.2])
    def test_bad_s(self, s):
        with pytest.raises(ValueError):
            singular_pair_rule("identical", 4, s, 1)


class TestAdaptiveEdgeRule:
    def test_plain_when_far(self):
        r = adaptive_edge_rule(1.5, base_order=7)
        np.testing.assert_array_equal(r.points, gauss_interval(7).points)

    def test_arctan(self):
        d = 1e-3
        r = adaptive_edge_rule(d, 8)
        val = r.integrate(lambda p: 1.0 / (p[:, 0] ** 2 + d * d))
        assert val == pytest.approx(math.atan(1 / d) / d, rel=1e-9)

    def test_power(self):
        d = 1e-2
        r = adaptive_edge_rule(d, 8)
        val = r.integrate(lambda p: (p[:, 0] ** 2 + d * d) ** -1.3)
        ref = quad(lambda x: (x * x + d * d) ** -1.3, 0, 1, points=[d, 10 * d],
                   epsabs=0, epsrel=1e-13, limit=500)[0]
        assert val == pytest.approx(ref, rel=1e-8)

    def test_logarithmic_growth(self):
        sizes = [len(adaptive_edge_rule(10.0 ** -k, 6)) for k in range(1, 9)]
        steps = np.diff(sizes)
        assert np.all(steps > 0) and np.all(steps <= 6 * 4)

    def test_positive(self):
        assert np.all(adaptive_edge_rule(1e-6).weights > 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            adaptive_edge_rule(0.0)
