import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from fraclap.assembly import AssemblyConfig, assemble_system, normalization_constant
from fraclap.mesh import Mesh, SubdomainSpec, axis_square, boundary_polygon, build_disc_mesh, \
    build_interval_mesh, refine_uniform
from fraclap.norms import (ERROR_QUADRATURE, EnergyDiagnostic, ErrorReport, ExactSolution,
                           UndefinedNormWarning, _outside_polygon_integrals, disc_exact_solution,
                           energy_error, eoc, fractional_seminorm, h1_seminorm_error,
                           integrate_elements, l2_error, localized_energy_error)
from fraclap.solver import FemFunction, solve


def _pointwise_laplacian_at_origin(s, dim):
    # C(d,s) p.v. int (u(0) - u(y)) |y|^{-d-2s} dy in polar form for u = (1-|y|^2)_+^s
    g = lambda r: (1 - (1 - r * r) ** s) * r ** (-1 - 2 * s)  # noqa: E731
    inner = quad(g, 0, 0.5, epsrel=1e-12)[0] + quad(g, 0.5, 1, epsrel=1e-12, limit=200)[0]
    radial = inner + 1 / (2 * s)
    sphere = 2.0 if dim == 1 else 2 * math.pi
    return normalization_constant(dim, s) * sphere * radial


class TestExactSolution:
    def test_2d_half(self):
        ex = disc_exact_solution(0.5, 2)
        assert ex.rhs_constant == pytest.approx(math.pi / 2, rel=1e-15)
        assert ex.energy_squared == pytest.approx(math.pi ** 2 / 3, rel=1e-15)

    def test_1d_half(self):
        assert disc_exact_solution(0.5, 1).rhs_constant == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("s", [0.2, 0.5, 0.8])
    def test_rhs_against_pointwise_operator(self, dim, s):
        ex = disc_exact_solution(s, dim)
        assert ex.rhs_constant == pytest.approx(_pointwise_laplacian_at_origin(s, dim), rel=1e-8)

    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("s", [0.3, 0.7])
    def test_energy_is_load_times_integral(self, dim, s):
        ex = disc_exact_solution(s, dim)
        if dim == 1:
            integral = quad(lambda x: (1 - x * x) ** s, -1, 1, epsabs=1e-14)[0]
        else:
            integral = 2 * math.pi * quad(lambda r: (1 - r * r) ** s * r, 0, 1, epsabs=1e-14)[0]
        assert ex.energy_squared == pytest.approx(ex.rhs_constant * integral, rel=1e-11)

    def test_values(self):
        ex = disc_exact_solution(0.4, 2)
        np.testing.assert_allclose(ex.value([[0.0, 0.0], [1.0, 0.0], [0.0, -2.0]]), [1, 0, 0])
        np.testing.assert_allclose(ex.gradient([[3.0, 0.0]]), [[0.0, 0.0]])

    def test_gradient_formula(self, rng):
        ex = disc_exact_solution(0.3, 2)
        x = 0.5 * rng.random((4, 2))
        w = 1 - np.sum(x * x, axis=1)
        np.testing.assert_allclose(ex.gradient(x), -2 * 0.3 * x * (w ** -0.7)[:, None], rtol=1e-14)

    @pytest.mark.parametrize("s", [0.0, 1.0])
    def test_bad_s(self, s):
        with pytest.raises(ValueError):
            disc_exact_solution(s, 2)

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            disc_exact_solution(0.5, 3)


class TestOutsidePolygon:
    @pytest.mark.parametrize("s", [0.3, 0.8])
    def test_sliver_against_dblquad(self, s):
        m = build_disc_mesh(8)
        l2, h1 = _outside_polygon_integrals(m, s)
        # one sliver between the chord from angle 0 to pi/4 and the arc, times 8
        d = math.cos(math.pi / 8)

        def rc(t):
            return d / math.cos(t - math.pi / 8)

        u2 = dblquad(lambda r, t: (1 - r * r) ** (2 * s) * r, 0, math.pi / 4, rc, 1,
                     epsabs=1e-12, epsrel=1e-10)[0]
        assert l2 == pytest.approx(8 * u2, rel=1e-7)
        if s > 0.5:
            g2 = dblquad(lambda r, t: 4 * s * s * r ** 3 * (1 - r * r) ** (2 * s - 2), 0,
                         math.pi / 4, rc, 1, epsabs=1e-13, epsrel=1e-11)[0]
            assert h1 == pytest.approx(8 * g2, rel=1e-5)
        else:
            assert math.isnan(h1)

    def test_polygon_outside_disc_rejected(self):
        m = build_disc_mesh(8).scaled(1.1)
        m = replace(m, domain="disc")
        with pytest.raises(ValueError):
            _outside_polygon_integrals(m, 0.5)


@pytest.fixture(scope="module")
def interpolants():
    ex = disc_exact_solution(0.5, 2)
    out = []
    m = build_disc_mesh(16, 2)
    for _ in range(3):
        out.append((m, FemFunction.interpolate(m, ex.value)))
        m = refine_uniform(m)
    return ex, out


class TestErrors:
    def test_interpolant_local_l2_rate(self, interpolants):
        ex, pairs = interpolants
        region = SubdomainSpec("disc", (0.0, 0.0), 0.5)
        errs = [l2_error(ex, u, region) for _, u in pairs]
        rates = eoc(errs, [m.h for m, _ in pairs])
        assert all(1.8 <= r <= 2.2 for r in rates)

    def test_interpolant_local_h1_rate(self, interpolants):
        ex, pairs = interpolants
        region = SubdomainSpec("disc", (0.0, 0.0), 0.5)
        errs = [h1_seminorm_error(ex, u, region) for _, u in pairs]
        rates = eoc(errs, [m.h for m, _ in pairs])
        assert all(0.85 <= r <= 1.15 for r in rates)

    def test_zero(self, disc_coarse):
        zero = ExactSolution(0.5, 2, 0.0, 0.0)
        u = FemFunction(disc_coarse, np.zeros(disc_coarse.n_vertices))

        class Zero:
            s = 0.7

            def value(self, x):
                return np.zeros(len(np.atleast_2d(x)))

            def gradient(self, x):
                return np.zeros_like(np.atleast_2d(x))

        assert l2_error(Zero(), u) == 0.0
        assert h1_seminorm_error(Zero(), u) == 0.0
        assert zero.energy_squared == 0.0

    def test_constant_h1(self, disc_coarse):
        class Const:
            s = 0.9

            def value(self, x):
                return np.full(len(np.atleast_2d(x)), 3.0)

            def gradient(self, x):
                return np.zeros_like(np.atleast_2d(x))

        u = FemFunction(disc_coarse, np.full(disc_coarse.n_vertices, 3.0))
        assert h1_seminorm_error(Const(), u) == pytest.approx(0.0, abs=1e-12)
        assert l2_error(Const(), u) <= 1e-14

    def test_global_h1_undefined_for_small_s(self, disc_coarse):
        ex = disc_exact_solution(0.5, 2)
        u = FemFunction(disc_coarse, np.zeros(disc_coarse.n_vertices))
        with pytest.warns(UndefinedNormWarning):
            assert math.isnan(h1_seminorm_error(ex, u))
        assert math.isfinite(h1_seminorm_error(ex, u, axis_square(1.0)))

    def test_empty_region(self, disc_coarse):
        ex = disc_exact_solution(0.5, 2)
        u = FemFunction(disc_coarse, np.zeros(disc_coarse.n_vertices))
        with pytest.warns(RuntimeWarning):
            assert math.isnan(l2_error(ex, u, axis_square(0.01, center=(5.0, 5.0))))

    @pytest.mark.parametrize("s", [0.3, 0.5, 0.8])
    def test_quadrature_self_consistency(self, disc_level1, s):
        ex = disc_exact_solution(s, 2)
        system = assemble_system(disc_level1, s, ex.rhs_constant)
        u = solve(system)
        fine = AssemblyConfig(boundary_levels=24, boundary_grading=0.25, boundary_order=12,
                              corner_angle=0.0, check_spd=False)

        def sq(ids, bary, X):
            e = ex.value(X.reshape(-1, 2)).reshape(X.shape[:2]) - u.element_values(ids, bary)
            return e * e

        coarse_val = integrate_elements(disc_level1, sq)
        fine_val = integrate_elements(disc_level1, sq, config=fine)
        assert coarse_val == pytest.approx(fine_val, rel=1e-2)
        grads = u.element_gradients()

        def gsq(ids, bary, X):
            g = ex.gradient(X.reshape(-1, 2)).reshape(X.shape) - grads[ids][:, None, :]
            return np.einsum("pqd,pqd->pq", g, g)

        if s > 0.5:
            a = integrate_elements(disc_level1, gsq)
            b = integrate_elements(disc_level1, gsq, config=fine)
            assert a == pytest.approx(b, rel=1e-2)

    def test_1d_errors(self):
        ex = disc_exact_solution(0.6, 1)
        errs, hs = [], []
        m = build_interval_mesh(16)
        for _ in range(3):
            u = solve(assemble_system(m, 0.6, ex.rhs_constant))
            errs.append(l2_error(ex, u))
            hs.append(m.h)
            m = refine_uniform(m)
        assert eoc(errs, hs)[-1] == pytest.approx(1.1, abs=0.15)


class TestEnergyError:
    def test_one_dof(self):
        m = build_interval_mesh(2)
        ex = disc_exact_solution(0.5, 1)
        system = assemble_system(m, 0.5, ex.rhs_constant)
        u = solve(system)
        rad = ex.energy_squared - system.F[0] ** 2 / system.K[0, 0]
        assert rad >= 0
        assert energy_error(system, u, ex) == pytest.approx(math.sqrt(rad), rel=1e-12)

    def test_zero_rhs(self, disc_coarse):
        system = assemble_system(disc_coarse, 0.5, 0.0)
        zero = ExactSolution(0.5, 2, 0.0, 0.0)
        assert energy_error(system, solve(system), zero) == 0.0

    def test_diagnostic(self, disc_coarse):
        system = assemble_system(disc_coarse, 0.5, 1.0)
        wrong = ExactSolution(0.5, 2, 1.0, 0.0)
        with pytest.raises(EnergyDiagnostic):
            energy_error(system, solve(system), wrong)

    def test_non_increasing_nested(self):
        s = 0.5
        ex = disc_exact_solution(s, 2)
        m = build_disc_mesh(16, 1, project_boundary=False)
        vals = []
        for _ in range(3):
            system = assemble_system(m, s, ex.rhs_constant)
            # the polygon is fixed, so compare Galerkin energies of nested spaces
            vals.append(float(solve(system).coefficients[system.free_vertices] @ system.F))
            m = refine_uniform(m, project_boundary=False)
        assert all(b >= a - 1e-10 for a, b in zip(vals, vals[1:]))

    def test_synthetic_reproduction(self, disc_coarse, rng):
        system = assemble_system(disc_coarse, 0.4, 1.0)
        c = rng.standard_normal(system.ndof)
        synthetic = system.with_load(system.K @ c)
        u = solve(synthetic)
        assert np.max(np.abs(u.coefficients[system.free_vertices] - c)) <= 1e-10
        target = FemFunction.from_free(disc_coarse, system.free_vertices, c)
        ex = ExactSolution(0.4, 2, 0.0, float(c @ system.K @ c))
        assert energy_error(synthetic, u, ex) <= 1e-6
        assert np.max(np.abs(u.coefficients - target.coefficients)) <= 1e-10


def _unit_interval(n):
    x = np.linspace(0.0, 1.0, n + 1)[:, None]
    bnd = np.zeros(n + 1, dtype=bool)
    bnd[[0, -1]] = True
    return Mesh(1, x, np.column_stack([np.arange(n), np.arange(1, n + 1)]), bnd)


class TestFractionalSeminorm:
    def test_constant(self, disc_coarse):
        v = FemFunction(disc_coarse, np.full(disc_coarse.n_vertices, 2.5))
        ref = fractional_seminorm(lambda x: 2.5 * x[:, 0], 0.4, mesh=disc_coarse)
        # the quadratic form cancels to roundoff; the square root magnifies it
        assert fractional_seminorm(v, 0.4) <= 1e-6 * ref

    def test_linear_half(self):
        m = _unit_interval(4)
        v = FemFunction.interpolate(m, lambda x: x[:, 0])
        assert fractional_seminorm(v, 0.5) ** 2 == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("t", [0.2, 0.7])
    def test_linear_general(self, t):
        v = FemFunction.interpolate(_unit_interval(3), lambda x: x[:, 0])
        exact = 2 / ((2 - 2 * t) * (3 - 2 * t))
        assert fractional_seminorm(v, t) ** 2 == pytest.approx(exact, rel=1e-8)

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_scaling_2d(self, disc_coarse, c):
        t = 0.35
        f = lambda x: np.sin(2 * x[:, 0]) + x[:, 1] ** 2  # noqa: E731
        a = fractional_seminorm(f, t, mesh=disc_coarse) ** 2
        b = fractional_seminorm(lambda x: f(x / c), t, mesh=disc_coarse.scaled(c)) ** 2
        assert b == pytest.approx(c ** (2 - 2 * t) * a, rel=1e-7)

    def test_region(self, disc_coarse):
        f = lambda x: x[:, 0]  # noqa: E731
        whole = fractional_seminorm(f, 0.5, mesh=disc_coarse)
        part = fractional_seminorm(f, 0.5, region=axis_square(1.2), mesh=disc_coarse)
        assert 0 < part < whole

    def test_callable_needs_mesh(self):
        with pytest.raises(ValueError):
            fractional_seminorm(lambda x: x[:, 0], 0.5)

    @pytest.mark.parametrize("t", [0.0, 1.0])
    def test_bad_t(self, disc_coarse, t):
        with pytest.raises(ValueError):
            fractional_seminorm(lambda x: x[:, 0], t, mesh=disc_coarse)

    def test_continuity_in_t(self):
        m = build_interval_mesh(6)
        f = lambda x: np.cos(x[:, 0])  # noqa: E731
        vals = [fractional_seminorm(f, t, mesh=m) for t in np.arange(0.1, 0.91, 0.05)]
        ratios = np.array(vals[1:]) / np.array(vals[:-1])
        assert np.all((ratios < 10) & (ratios > 0.1))

    def test_triangle_inequality(self, disc_coarse, rng):
        n = disc_coarse.n_vertices
        v = FemFunction(disc_coarse, rng.standard_normal(n))
        w = FemFunction(disc_coarse, rng.standard_normal(n))
        lhs = fractional_seminorm(v + w, 0.6)
        assert lhs <= fractional_seminorm(v, 0.6) + fractional_seminorm(w, 0.6) + 1e-10


@pytest.fixture(scope="module")
def level2_half():
    s = 0.5
    ex = disc_exact_solution(s, 2)
    mesh = refine_uniform(build_disc_mesh(16, 2))
    system = assemble_system(mesh, s, ex.rhs_constant)
    return ex, system, solve(system)


class TestLocalizedEnergy:
    def test_zero_error(self, level2_half):
        ex, system, _ = level2_half
        u = FemFunction.interpolate(system.mesh, ex.value)
        assert localized_energy_error(u, ex, axis_square(0.4), axis_square(1.0)) == 0.0

    def test_system_path_matches_pair_form(self, level2_half):
        ex, system, u = level2_half
        a = localized_energy_error(u, ex, axis_square(0.4), axis_square(1.0), system=system)
        b = localized_energy_error(u, ex, axis_square(0.4), axis_square(1.0))
        assert a == pytest.approx(b, rel=1e-8)

    @pytest.mark.parametrize("small,large", [(0.1, 0.4), (0.2, 0.3)])
    def test_monotone_for_ordered_cutoffs(self, level2_half, small, large):
        from fraclap.projections import build_cutoff

        ex, system, u = level2_half
        outer = axis_square(1.0)
        eta = build_cutoff(system.mesh, axis_square(small), outer).values
        eta_big = build_cutoff(system.mesh, axis_square(large), outer).values
        assert np.all(eta <= eta_big)
        a = localized_energy_error(u, ex, axis_square(small), outer, system=system)
        b = localized_energy_error(u, ex, axis_square(large), outer, system=system)
        assert a <= b + 1e-10

    def test_positive_and_below_full_norm(self, level2_half):
        ex, _, u = level2_half
        val = localized_energy_error(u, ex, axis_square(0.4), axis_square(1.0), t=0.3)
        err = FemFunction(u.mesh, ex.value(u.mesh.vertices) - u.coefficients)
        full = math.sqrt(fractional_seminorm(err, 0.3) ** 2 + l2_error(ex, u) ** 2)
        assert 0 < val < 2 * full

    def test_thin_layer(self, disc_level1):
        ex = disc_exact_solution(0.5, 2)
        u = FemFunction(disc_level1, np.zeros(disc_level1.n_vertices))
        with pytest.raises(ValueError):
            localized_energy_error(u, ex, axis_square(0.4), axis_square(0.5))


class TestEoc:
    def test_two_points(self):
        assert eoc([1, 0.25], [1, 0.5]) == [pytest.approx(2.0)]

    def test_three_points(self):
        np.testing.assert_allclose(eoc([1, 0.5, 0.25], [1, 0.5, 0.25]), [1, 1])

    def test_synthetic(self):
        h = np.array([0.3, 0.17, 0.09, 0.05])
        np.testing.assert_allclose(eoc(h ** 0.8, h), 0.8, atol=1e-12)

    @pytest.mark.parametrize("e,h", [([1, 0], [1, 0.5]), ([1, 2], [1, 1]), ([1], [1]),
                                     ([1, -1], [1, 0.5]), ([1, 2, 3], [1, 0.5])])
    def test_invalid(self, e, h):
        with pytest.raises(ValueError):
            eoc(e, h)


def test_error_report_rejects_negative():
    with pytest.raises(ValueError):
        ErrorReport(1.0, math.nan, 0.1, 0.1, -1.0)
    r = ErrorReport(1.0, math.nan, 0.1, 0.1, 0.2)
    assert math.isnan(r.energy_local)


def test_error_quadrature_settings():
    assert ERROR_QUADRATURE.boundary_levels >= 12
    assert ERROR_QUADRATURE.boundary_grading == 0.25
    assert ERROR_QUADRATURE.boundary_order >= 6


def test_no_warning_on_local_h1(disc_coarse):
    ex = disc_exact_solution(0.3, 2)
    u = FemFunction(disc_coarse, np.zeros(disc_coarse.n_vertices))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        h1_seminorm_error(ex, u, axis_square(1.0))
