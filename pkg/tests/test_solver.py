import math

import numpy as np
import pytest
from sklearn.base import clone

from fraclap.assembly import StiffnessSystem, assemble_system
from fraclap.mesh import build_disc_mesh, build_interval_mesh
from fraclap.norms import disc_exact_solution
from fraclap.solver import (FemFunction, FractionalLaplaceSolver, SolverFailure,
                            galerkin_energy, relative_residual, solve)


def _system(K, F):
    K = np.asarray(K, dtype=float)
    n = len(K)
    mesh = build_interval_mesh(n + 1)
    free = np.arange(1, n + 1)
    rows = -np.ones(mesh.n_vertices, dtype=np.int64)
    rows[free] = np.arange(n)
    return StiffnessSystem(mesh, K, np.asarray(F, dtype=float), free, rows, 0.5, 1.0)


@pytest.fixture(scope="module")
def disc_system():
    m = build_disc_mesh(16, 2)
    return assemble_system(m, 0.5, disc_exact_solution(0.5, 2).rhs_constant)


class TestSolve:
    @pytest.mark.parametrize("method", ["cholesky", "cg"])
    def test_identity(self, method):
        u = solve(_system(np.eye(3), [1, 0, 0]), method)
        np.testing.assert_array_equal(u.coefficients[1:4], [1, 0, 0])

    @pytest.mark.parametrize("method", ["cholesky", "cg"])
    def test_two_by_two(self, method):
        u = solve(_system([[2, 1], [1, 2]], [1, 1]), method)
        np.testing.assert_allclose(u.coefficients[1:3], [1 / 3, 1 / 3], rtol=1e-14)

    def test_boundary_coefficients_zero(self, disc_system):
        u = solve(disc_system)
        assert np.all(u.coefficients[disc_system.mesh.boundary_vertex] == 0.0)

    def test_residual(self, disc_system):
        u = solve(disc_system)
        assert relative_residual(disc_system, u) <= 1e-12
        c = u.coefficients[disc_system.free_vertices]
        r = disc_system.K @ c - disc_system.F
        assert np.max(np.abs(r)) <= 1e-12 * np.max(np.abs(disc_system.F))

    def test_cholesky_matches_cg(self, disc_system):
        a = solve(disc_system, "cholesky").coefficients
        b = solve(disc_system, "cg").coefficients
        assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))

    def test_indefinite_reports_pivot(self):
        K = np.diag([1.0, 2.0, -1.0, 3.0])
        with pytest.raises(SolverFailure) as info:
            solve(_system(K, np.ones(4)))
        assert info.value.pivot == 2

    def test_cg_non_positive_diagonal(self):
        with pytest.raises(SolverFailure) as info:
            solve(_system(np.diag([1.0, 0.0]), [1, 1]), "cg")
        assert info.value.pivot == 1

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            solve(_system(np.eye(2), [1, 1]), "lu")


class TestGalerkinEnergy:
    def test_zero_load(self, disc_system):
        zero = disc_system.with_load(np.zeros(disc_system.ndof))
        assert galerkin_energy(zero, solve(zero)) == 0.0

    def test_two_by_two(self):
        system = _system([[2, 1], [1, 2]], [1, 1])
        assert galerkin_energy(system, solve(system)) == pytest.approx(2 / 3, rel=1e-14)

    def test_inconsistent(self):
        system = _system([[2, 1], [1, 2]], [1, 1])
        wrong = FemFunction(system.mesh, [0, 1, 0, 0])
        with pytest.raises(AssertionError):
            galerkin_energy(system, wrong)

    def test_disc_below_exact_energy(self, disc_system):
        e = galerkin_energy(disc_system, solve(disc_system))
        assert 0 < e < math.pi ** 2 / 3


class TestFemFunction:
    def test_vertex_values_and_affinity(self, disc_coarse, rng):
        c = rng.standard_normal(disc_coarse.n_vertices)
        f = FemFunction(disc_coarse, c)
        np.testing.assert_allclose(f(disc_coarse.vertices), c, atol=1e-13)
        t = 7
        P = disc_coarse.vertices[disc_coarse.elements[t]]
        lam = rng.dirichlet(np.ones(3), size=4)
        np.testing.assert_allclose(f(lam @ P), lam @ c[disc_coarse.elements[t]], atol=1e-13)

    def test_outside_is_nan(self, disc_coarse):
        f = FemFunction(disc_coarse, np.ones(disc_coarse.n_vertices))
        assert np.isnan(f(np.array([[5.0, 5.0]]))[0])

    def test_gradient_of_linear(self, disc_coarse):
        f = FemFunction.interpolate(disc_coarse, lambda x: 2 * x[:, 0] - 3 * x[:, 1])
        np.testing.assert_allclose(f.element_gradients(),
                                   np.tile([2.0, -3.0], (disc_coarse.n_elements, 1)), atol=1e-12)

    def test_arithmetic(self, interval4):
        a = FemFunction(interval4, np.arange(5.0))
        b = FemFunction(interval4, np.ones(5))
        np.testing.assert_array_equal((a - b).coefficients, np.arange(5.0) - 1)
        np.testing.assert_array_equal((2 * a).coefficients, 2 * np.arange(5.0))

    def test_shape_checked(self, interval4):
        with pytest.raises(ValueError):
            FemFunction(interval4, np.ones(3))

    def test_read_only(self, interval4):
        f = FemFunction(interval4, np.zeros(5))
        with pytest.raises(ValueError):
            f.coefficients[0] = 1.0


class TestEstimator:
    def test_fit_predict(self):
        m = build_interval_mesh(16)
        est = FractionalLaplaceSolver(s=0.5, load=1.0).fit(m)
        pred = est.predict(np.array([[0.0], [0.5]]))
        exact = disc_exact_solution(0.5, 1)
        # the 1D constant load 1 gives u = sqrt(1 - x^2) for s = 1/2
        np.testing.assert_allclose(pred, exact.value(np.array([[0.0], [0.5]])), rtol=0.05)
        assert est.energy_ > 0

    def test_params_round_trip(self):
        est = FractionalLaplaceSolver(s=0.3, method="cg", workers=2)
        assert clone(est).get_params() == est.get_params()

    def test_predict_before_fit(self):
        with pytest.raises(AttributeError):
            FractionalLaplaceSolver().predict(np.zeros((1, 1)))
