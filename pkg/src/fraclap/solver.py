"""Solution of the dense Galerkin system and piecewise-linear functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, cg
from sklearn.base import BaseEstimator, RegressorMixin

from .assembly import AssemblyConfig, StiffnessSystem, assemble_system
from .mesh import Mesh

RESIDUAL_TOL = 1e-12
CG_TOL = 1e-13


class SolverFailure(RuntimeError):
    """Raised when the system matrix is not positive definite.

    Attributes
    ----------
    pivot : int
        Zero-based row of the first non-positive pivot (``-1`` if unknown).
    """

    def __init__(self, message: str, pivot: int = -1):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class FemFunction:
    """Continuous piecewise-linear function given by its vertex values."""

    mesh: Mesh
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if c.shape != (self.mesh.n_vertices,):
            raise ValueError("one coefficient per vertex is required")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def from_free(cls, mesh: Mesh, free_vertices: np.ndarray, values: np.ndarray) -> "FemFunction":
        """Function vanishing on the boundary with ``values`` at ``free_vertices``."""
        c = np.zeros(mesh.n_vertices)
        c[free_vertices] = values
        return cls(mesh, c)

    @classmethod
    def interpolate(cls, mesh: Mesh, f) -> "FemFunction":
        """Nodal interpolant of a vectorised callable."""
        return cls(mesh, np.asarray(f(mesh.vertices), dtype=float).reshape(-1))

    def element_values(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Values at barycentric points ``bary`` (nq, dim+1) of each element, shape (ne, nq)."""
        return self.coefficients[self.mesh.elements[elements]] @ bary.T

    def element_gradients(self, elements: np.ndarray | None = None) -> np.ndarray:
        """Constant gradient on each element, shape (ne, dim)."""
        ids = slice(None) if elements is None else elements
        c = self.coefficients[self.mesh.elements[ids]]
        return np.einsum("pa,pad->pd", c, self.mesh.gradients[ids])

    def __call__(self, points) -> np.ndarray:
        """Evaluate at arbitrary points; ``nan`` outside the mesh."""
        elem, bary = self.mesh.locate(points)
        out = np.full(len(elem), np.nan)
        ok = elem >= 0
        out[ok] = np.einsum("pa,pa->p", self.coefficients[self.mesh.elements[elem[ok]]], bary[ok])
        return out

    def __add__(self, other: "FemFunction") -> "FemFunction":
        if other.mesh is not self.mesh:
            raise ValueError("functions live on different meshes")
        return FemFunction(self.mesh, self.coefficients + other.coefficients)

    def __sub__(self, other: "FemFunction") -> "FemFunction":
        return self + (-1.0) * other

    def __mul__(self, factor: float) -> "FemFunction":
        return FemFunction(self.mesh, float(factor) * self.coefficients)

    __rmul__ = __mul__


def _first_bad_pivot(K: np.ndarray) -> int:
    """Index of the first non-positive pivot of an unpivoted Cholesky sweep."""
    _, info = scipy.linalg.lapack.dpotrf(K, lower=True, clean=False, overwrite_a=False)
    return int(info) - 1 if info > 0 else -1


def _cholesky(system: StiffnessSystem):
    if system.cholesky is not None:
        return system.cholesky
    try:
        return scipy.linalg.cho_factor(system.K, lower=True)
    except np.linalg.LinAlgError as exc:
        pivot = _first_bad_pivot(system.K)
        raise SolverFailure(f"matrix is not positive definite at pivot {pivot}", pivot) from exc


def _jacobi_cg(K: np.ndarray, F: np.ndarray, tol: float, maxiter: int) -> np.ndarray:
    d = np.diag(K).copy()
    bad = np.flatnonzero(d <= 0)
    if len(bad):
        raise SolverFailure(f"non-positive diagonal entry at row {bad[0]}", int(bad[0]))
    jacobi = LinearOperator(K.shape, matvec=lambda r: r / d, dtype=float)
    x, info = cg(K, F, rtol=tol, atol=0.0, maxiter=maxiter, M=jacobi)
    if info != 0:
        raise SolverFailure(f"conjugate gradients did not reach {tol:g} in {maxiter} steps")
    return x


def solve(system: StiffnessSystem, method: str = "cholesky", maxiter: int | None = None
          ) -> FemFunction:
    """Solve ``K c = F`` and return the finite element function.

    Parameters
    ----------
    method : {"cholesky", "cg"}
        Dense Cholesky (reusing the factor from assembly when present) or
        Jacobi-preconditioned conjugate gradients with tolerance 1e-13.

    Raises
    ------
    SolverFailure
        For non positive definite matrices, carrying the offending pivot.
    """
    K, F = system.K, np.asarray(system.F, dtype=float)
    if system.ndof == 0:
        return FemFunction.from_free(system.mesh, system.free_vertices, np.zeros(0))
    if method == "cholesky":
        c = scipy.linalg.cho_solve(_cholesky(system), F)
    elif method == "cg":
        c = _jacobi_cg(K, F, CG_TOL, maxiter or 10 * system.ndof)
    else:
        raise ValueError(f"unknown method {method!r}")
    norm_f = np.linalg.norm(F)
    if norm_f > 0:
        res = np.linalg.norm(K @ c - F) / norm_f
        if res > RESIDUAL_TOL:
            # one step of iterative refinement recovers the last digits
            c = c + scipy.linalg.cho_solve(_cholesky(system), F - K @ c)
    return FemFunction.from_free(system.mesh, system.free_vertices, c)


def relative_residual(system: StiffnessSystem, u_h: FemFunction) -> float:
    c = u_h.coefficients[system.free_vertices]
    norm_f = np.linalg.norm(system.F)
    r = np.linalg.norm(system.K @ c - system.F)
    return float(r / norm_f) if norm_f > 0 else float(r)


def galerkin_energy(system: StiffnessSystem, u_h: FemFunction, rtol: float = 1e-10) -> float:
    """``c^T F``, checked against ``c^T K c``."""
    c = u_h.coefficients[system.free_vertices]
    cf = float(c @ system.F)
    ckc = float(c @ (system.K @ c))
    if abs(ckc - cf) > rtol * abs(cf) + 1e-300:
        raise AssertionError(f"inconsistent system: c^T K c = {ckc!r}, c^T F = {cf!r}")
    return cf


class FractionalLaplaceSolver(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit`` takes a mesh and a load, ``predict`` evaluates ``u_h``.

    Parameters
    ----------
    s : float
        Order of the operator, ``0 < s < 1``.
    load : float or callable
        Right-hand side ``f``.
    method : {"cholesky", "cg"}
    workers : int
    """

    def __init__(self, s: float = 0.5, load=1.0, method: str = "cholesky", workers: int = 1):
        self.s = s
        self.load = load
        self.method = method
        self.workers = workers

    def fit(self, mesh: Mesh, y=None):
        self.system_ = assemble_system(mesh, self.s, self.load,
                                       AssemblyConfig(workers=self.workers))
        self.solution_ = solve(self.system_, self.method)
        self.energy_ = galerkin_energy(self.system_, self.solution_)
        return self

    def predict(self, points) -> np.ndarray:
        if not hasattr(self, "solution_"):
            raise AttributeError("call fit before predict")
        return self.solution_(np.asarray(points, dtype=float))
