"""Exact disc solutions and error norms of finite element approximations."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gamma

from .assembly import (AssemblyConfig, StiffnessSystem, _check_s, _exterior_matrix,
                       _jacobian_factor, element_rules, normalization_constant,
                       pair_form_matrix)
from .mesh import Mesh, SubdomainSpec, boundary_polygon, mark_subdomain
from .quadrature import _legendre01
from .solver import FemFunction

#: graded element quadrature used for all error integrals
ERROR_QUADRATURE = AssemblyConfig(boundary_levels=12, boundary_grading=0.25, boundary_order=6,
                                  corner_angle=0.0, check_spd=False)


class UndefinedNormWarning(RuntimeWarning):
    """A requested norm does not exist for the given data."""


class EnergyDiagnostic(ArithmeticError):
    """``a(u, u) - c^T F`` is negative beyond round-off."""


@dataclass(frozen=True)
class ExactSolution:
    """Solution of ``(-Delta)^s u = f`` with constant ``f`` on the unit ball.

    ``value`` and ``gradient`` are vectorised over rows of points.
    """

    s: float
    dim: int
    rhs_constant: float
    energy_squared: float

    def value(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = 1.0 - np.einsum("nd,nd->n", x, x)
        return np.where(w > 0.0, np.maximum(w, 0.0) ** self.s, 0.0)

    def gradient(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = 1.0 - np.einsum("nd,nd->n", x, x)
        inside = w > 0.0
        fac = np.zeros(len(x))
        fac[inside] = -2.0 * self.s * w[inside] ** (self.s - 1.0)
        return fac[:, None] * x

    def __call__(self, x) -> np.ndarray:
        return self.value(x)


def disc_exact_solution(s: float, dim: int) -> ExactSolution:
    """``u = (1 - |x|^2)_+^s`` with its constant load and energy ``a(u, u)``."""
    s = _check_s(s)
    if dim == 2:
        f = 2.0 ** (2 * s) * gamma(1 + s) ** 2
        energy = f * math.pi / (s + 1)
    elif dim == 1:
        f = 2.0 ** (2 * s) * gamma(s + 0.5) * gamma(s + 1) / gamma(0.5)
        energy = f * math.sqrt(math.pi) * gamma(s + 1) / gamma(s + 1.5)
    else:
        raise ValueError("dim must be 1 or 2")
    return ExactSolution(s, dim, float(f), float(energy))


@dataclass(frozen=True)
class ErrorReport:
    """Error norms of one discrete solution; ``nan`` marks an undefined value."""

    l2_global: float
    h1_global: float
    l2_local: float
    h1_local: float
    energy_global: float
    energy_local: float = math.nan
    region: SubdomainSpec | None = None

    def __post_init__(self):
        for name in ("l2_global", "h1_global", "l2_local", "h1_local", "energy_global",
                     "energy_local"):
            v = getattr(self, name)
            if not (math.isnan(v) or v >= 0.0):
                raise ValueError(f"{name} must be non-negative")


# ---------------------------------------------------------------------------
# element integration


def _region_elements(mesh: Mesh, region) -> np.ndarray | None:
    if region is None:
        return None
    if isinstance(region, SubdomainSpec):
        if region.resolved_elements is None:
            region = mark_subdomain(mesh, region)
        return np.asarray(region.resolved_elements, dtype=np.int64)
    return np.asarray(region, dtype=np.int64)


def integrate_elements(mesh: Mesh, integrand: Callable, elements=None,
                       config: AssemblyConfig = ERROR_QUADRATURE) -> float:
    """``sum_T int_T integrand`` over the selected elements with graded rules.

    ``integrand(ids, bary, X)`` receives element ids, barycentric points
    (nq, dim+1) and physical points (n_ids, nq, dim) and returns values of
    shape (n_ids, nq).
    """
    J = _jacobian_factor(mesh)
    total = 0.0
    for ids, bary, w in element_rules(mesh, config, elements):
        step = max(1, 500000 // len(w))
        for lo in range(0, len(ids), step):
            chunk = ids[lo:lo + step]
            X = np.einsum("qa,pad->pqd", bary, mesh.vertices[mesh.elements[chunk]])
            vals = integrand(chunk, bary, X)
            total += float(np.sum((vals @ w) * J[chunk]))
    return total


def _outside_polygon_integrals(mesh: Mesh, s: float, n: int = 64) -> tuple[float, float]:
    """``int u^2`` and ``int |grad u|^2`` over the unit disc minus the mesh polygon.

    The polygon must be star-shaped about the origin and inscribed in the
    disc; the radial integrals are done in closed form.
    """
    A, B = boundary_polygon(mesh)
    if np.max(np.linalg.norm(np.vstack([A, B]), axis=1)) > 1.0 + 1e-12:
        raise ValueError("mesh polygon is not contained in the unit disc")
    t, wt = _legendre01(n)
    l2 = 0.0
    h1 = 0.0 if s > 0.5 else math.nan
    for a, b in zip(A, B):
        ta, tb = math.atan2(a[1], a[0]), math.atan2(b[1], b[0])
        span = (tb - ta) % (2 * math.pi)
        e = b - a
        d = abs(a[0] * b[1] - a[1] * b[0]) / np.linalg.norm(e)
        normal = math.atan2(-e[0], e[1])  # direction of the foot of the perpendicular
        theta = ta + span * t
        rc = d / np.cos(theta - normal)
        wc = np.clip(1.0 - rc * rc, 0.0, None)
        l2 += span * float(wt @ (wc ** (2 * s + 1) / (2 * (2 * s + 1))))
        if s > 0.5:
            h1 += span * float(wt @ (2 * s * s * (wc ** (2 * s - 1) / (2 * s - 1)
                                                  - wc ** (2 * s) / (2 * s))))
    return l2, h1


def _is_whole(region) -> bool:
    return region is None


def _with_outside(exact, mesh: Mesh, region) -> bool:
    # the disc minus the inscribed mesh polygon, where u_h is zero
    return (_is_whole(region) and mesh.dim == 2 and mesh.domain == "disc"
            and isinstance(exact, ExactSolution))


def l2_error(exact: ExactSolution, u_h: FemFunction, region=None) -> float:
    """``||u - u_h||_{L2(region)}``; the whole domain when ``region`` is None.

    For the whole 2D domain the part of the unit disc outside the mesh
    polygon (where ``u_h = 0``) is included.
    """
    mesh = u_h.mesh
    elems = _region_elements(mesh, region)
    if elems is not None and len(elems) == 0:
        return math.nan

    def sq(ids, bary, X):
        e = exact.value(X.reshape(-1, mesh.dim)).reshape(X.shape[:2])
        e -= u_h.element_values(ids, bary)
        return e * e

    total = integrate_elements(mesh, sq, elems)
    if _with_outside(exact, mesh, region):
        total += _outside_polygon_integrals(mesh, exact.s)[0]
    return math.sqrt(total)


def h1_seminorm_error(exact: ExactSolution, u_h: FemFunction, region=None) -> float:
    """Broken ``|u - u_h|_{H1(region)}``.

    On the whole domain the exact gradient is square integrable only for
    ``s > 1/2``; otherwise ``nan`` is returned with an
    :class:`UndefinedNormWarning`.
    """
    mesh = u_h.mesh
    if _is_whole(region) and getattr(exact, "s", 1.0) <= 0.5:
        warnings.warn(f"global H1 error undefined for s = {exact.s} <= 1/2: "
                      "the exact gradient is not square integrable", UndefinedNormWarning,
                      stacklevel=2)
        return math.nan
    elems = _region_elements(mesh, region)
    if elems is not None and len(elems) == 0:
        return math.nan
    grads = u_h.element_gradients()

    def sq(ids, bary, X):
        g = exact.gradient(X.reshape(-1, mesh.dim)).reshape(X.shape)
        g -= grads[ids][:, None, :]
        return np.einsum("pqd,pqd->pq", g, g)

    total = integrate_elements(mesh, sq, elems)
    if _with_outside(exact, mesh, region):
        total += _outside_polygon_integrals(mesh, exact.s)[1]
    return math.sqrt(total)


def energy_error(system: StiffnessSystem, u_h: FemFunction, exact: ExactSolution,
                 tol: float = 1e-10) -> float:
    """``(a(u, u) - c^T F)^{1/2}``, the energy-norm error by Galerkin orthogonality.

    Raises
    ------
    EnergyDiagnostic
        If the radicand is below ``-tol``.
    """
    c = u_h.coefficients[system.free_vertices]
    rad = exact.energy_squared - float(c @ system.F)
    if rad < -tol:
        raise EnergyDiagnostic(f"a(u,u) - c^T F = {rad:.3e} < 0: quadrature or geometry error")
    return math.sqrt(max(rad, 0.0))


def fractional_seminorm(v, t: float, region=None, mesh: Mesh | None = None,
                        config: AssemblyConfig | None = None) -> float:
    """``|v|_{H^t(R)} = (int_R int_R (v(x)-v(y))^2 |x-y|^{-d-2t})^{1/2}``.

    ``v`` is a :class:`FemFunction` or a callable sampled at the vertices of
    ``mesh`` (nodal interpolation); ``R`` is the union of the region's
    elements, the whole mesh by default.
    """
    t = _check_s(t, "t")
    if not isinstance(v, FemFunction):
        if mesh is None:
            raise ValueError("a mesh is required to sample a callable")
        v = FemFunction.interpolate(mesh, v)
    mesh = v.mesh
    elems = _region_elements(mesh, region)
    if elems is not None and len(elems) == 0:
        return math.nan
    nv = mesh.n_vertices
    used = np.unique(mesh.elements if elems is None else mesh.elements[elems])
    dofs = -np.ones(nv, dtype=np.int64)
    dofs[used] = np.arange(len(used))
    A = pair_form_matrix(mesh, t, dofs, len(used), elements=elems, config=config)
    c = v.coefficients[used]
    return math.sqrt(max(float(c @ A @ c), 0.0))


def localized_energy_error(u_h: FemFunction, exact: ExactSolution, inner, outer,
                           t: float | None = None, system: StiffnessSystem | None = None
                           ) -> float:
    """``||I_h(eta_h (u - u_h))||_{H^t(Omega)}`` with a piecewise-linear cutoff.

    ``eta_h`` equals 1 on the inner region and 0 outside the outer one.  The
    seminorm part covers ``Omega x Omega``; when ``system`` is given and
    ``t = s`` it is read off from ``K`` minus the exterior-weight term.
    """
    from .projections import build_cutoff

    mesh = u_h.mesh
    t = exact.s if t is None else _check_s(t, "t")
    cut = build_cutoff(mesh, inner, outer)
    err = exact.value(mesh.vertices) - u_h.coefficients
    w = FemFunction(mesh, cut.values * err)
    mass = _mass_norm_sq(w)
    if system is not None and abs(system.s - t) == 0.0 and system.mesh is mesh:
        c = w.coefficients[system.free_vertices]
        if np.any(w.coefficients[mesh.boundary_vertex] != 0.0):
            raise ValueError("cutoff does not vanish on the boundary")
        energy = float(c @ (system.K @ c))
        support = np.flatnonzero(w.coefficients != 0.0)
        dofs = -np.ones(mesh.n_vertices, dtype=np.int64)
        dofs[support] = np.arange(len(support))
        M = _exterior_matrix(mesh, t, dofs, len(support), AssemblyConfig())
        cs = w.coefficients[support]
        ext = float(cs @ M @ cs)
        C = normalization_constant(mesh.dim, t)
        semi = 2.0 * (energy - C * ext) / C
    else:
        semi = fractional_seminorm(w, t) ** 2
    return math.sqrt(max(semi, 0.0) + mass)


def _mass_norm_sq(v: FemFunction) -> float:
    from .assembly import assemble_mass

    c = v.coefficients
    return float(c @ (assemble_mass(v.mesh) @ c))


def eoc(values, hs) -> list[float]:
    """Pairwise experimental orders ``log(e_k/e_{k+1}) / log(h_k/h_{k+1})``."""
    e = np.asarray(values, dtype=float)
    h = np.asarray(hs, dtype=float)
    if e.shape != h.shape or e.ndim != 1 or len(e) < 2:
        raise ValueError("need two equally long sequences of length >= 2")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("errors and mesh sizes must be positive")
    if np.any(np.diff(h) >= 0):
        raise ValueError("mesh sizes must be strictly decreasing")
    return list(np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:]))
