"""L2 projection, a patchwise quasi-interpolant, cut-off functions and analysis probes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .assembly import _jacobian_factor, assemble_mass
from .mesh import Mesh, SubdomainSpec, mark_subdomain
from .quadrature import gauss_simplex
from .solver import FemFunction

_QUAD_ORDER = 8


class ProductField:
    """Pointwise product of finite element functions on one mesh."""

    def __init__(self, *factors: FemFunction):
        if not factors or any(f.mesh is not factors[0].mesh for f in factors):
            raise ValueError("factors must share one mesh")
        self.factors = factors
        self.mesh = factors[0].mesh

    def element_values(self, ids, bary):
        out = self.factors[0].element_values(ids, bary)
        for f in self.factors[1:]:
            out = out * f.element_values(ids, bary)
        return out

    def element_gradients_at(self, ids, bary):
        """Gradients at the points, shape (n_ids, nq, dim) (product rule)."""
        vals = [f.element_values(ids, bary) for f in self.factors]
        grads = [f.element_gradients(ids) for f in self.factors]
        out = 0.0
        for k in range(len(self.factors)):
            term = grads[k][:, None, :]
            for j in range(len(self.factors)):
                if j != k:
                    term = term * vals[j][:, :, None]
            out = out + term
        return out

    def __call__(self, points):
        out = self.factors[0](points)
        for f in self.factors[1:]:
            out = out * f(points)
        return out


def _sample(mesh: Mesh, f, ids, bary, X):
    """Values of a field at element points: FemFunction, ProductField, callable or constant."""
    if hasattr(f, "element_values") and getattr(f, "mesh", None) is mesh:
        return f.element_values(ids, bary)
    if callable(f):
        vals = np.asarray(f(X.reshape(-1, mesh.dim)), dtype=float)
        return vals.reshape(X.shape[:2])
    return np.full(X.shape[:2], float(f))


def _element_points(mesh: Mesh, ids=None, order: int = _QUAD_ORDER):
    rule = gauss_simplex(mesh.dim, order)
    bary = rule.barycentric()
    ids = np.arange(mesh.n_elements) if ids is None else np.asarray(ids, dtype=np.int64)
    X = np.einsum("qa,pad->pqd", bary, mesh.vertices[mesh.elements[ids]])
    W = rule.weights[None, :] * _jacobian_factor(mesh)[ids][:, None]
    return ids, bary, X, W


def load_vector(mesh: Mesh, f, order: int = _QUAD_ORDER) -> np.ndarray:
    """``b_i = int f phi_i`` over all vertices."""
    ids, bary, X, W = _element_points(mesh, order=order)
    vals = _sample(mesh, f, ids, bary, X)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.elements.ravel(), ((vals * W) @ bary).ravel())
    return b


def l2_norm(mesh: Mesh, f, elements=None, order: int = _QUAD_ORDER) -> float:
    ids, bary, X, W = _element_points(mesh, elements, order)
    vals = _sample(mesh, f, ids, bary, X)
    return math.sqrt(float(np.sum(vals * vals * W)))


def l2_projection(mesh: Mesh, f, constrained: bool = False) -> FemFunction:
    """Galerkin ``L2`` projection onto continuous P1, or onto P1 with zero boundary values.

    ``f`` may be a :class:`FemFunction`, a vectorised callable or a constant.
    """
    M = assemble_mass(mesh).tocsc()
    if isinstance(f, FemFunction) and f.mesh is mesh:
        b = M @ f.coefficients
    else:
        b = load_vector(mesh, f)
    c = np.zeros(mesh.n_vertices)
    rows = mesh.free_vertices if constrained else np.arange(mesh.n_vertices)
    if len(rows):
        Mr = M[rows][:, rows].tocsc()
        c[rows] = splu(Mr).solve(b[rows])
    return FemFunction(mesh, c)


def quasi_interpolant(mesh: Mesh, f) -> FemFunction:
    """Patchwise projection read off at each vertex.

    The value at vertex ``z`` is the ``L2(T_z)`` projection of ``f`` onto
    affine functions evaluated at ``z``, where ``T_z`` is the incident
    element of lowest index.  It reproduces continuous P1 functions and only
    looks at ``f`` on ``T_z``.
    """
    off, inc = mesh.vertex_elements
    owner = np.array([inc[off[v]:off[v + 1]].min() for v in range(mesh.n_vertices)])
    used = np.unique(owner)
    ids, bary, X, W = _element_points(mesh, used)
    vals = _sample(mesh, f, ids, bary, X)
    rhs = (vals * W) @ bary  # (n_used, nl)
    nl = mesh.dim + 1
    ref = (np.ones((nl, nl)) + np.eye(nl)) / (nl * (nl + 1))
    coef = np.linalg.solve(ref, rhs.T).T / mesh.volumes[used][:, None]
    slot = {int(e): k for k, e in enumerate(used)}
    c = np.empty(mesh.n_vertices)
    for v in range(mesh.n_vertices):
        e = int(owner[v])
        local = int(np.flatnonzero(mesh.elements[e] == v)[0])
        c[v] = coef[slot[e], local]
    return FemFunction(mesh, c)


# ---------------------------------------------------------------------------
# cut-off functions


def _distance_to_region(spec: SubdomainSpec, points: np.ndarray) -> np.ndarray:
    c = np.asarray(spec.center, dtype=float)[: points.shape[1]]
    if spec.kind == "axis-square":
        gap = np.maximum(np.abs(points - c) - 0.5 * spec.size, 0.0)
        return np.linalg.norm(gap, axis=1)
    if spec.kind == "disc":
        return np.maximum(np.linalg.norm(points - c, axis=1) - spec.size, 0.0)
    raise ValueError(f"cut-off needs a geometric region, got {spec.kind!r}")


def _layer_width(inner: SubdomainSpec, outer: SubdomainSpec) -> float:
    if inner.kind != outer.kind or tuple(inner.center) != tuple(outer.center):
        raise ValueError("inner and outer regions must be concentric and of one kind")
    if inner.kind == "axis-square":
        return 0.5 * (outer.size - inner.size)
    return outer.size - inner.size


@dataclass(frozen=True, eq=False)
class CutoffFunction:
    """Piecewise-linear cut-off ``eta_h``: 1 on the inner region, 0 outside the outer one.

    Attributes
    ----------
    values : ndarray
        Nodal values in [0, 1].
    distance : float
        Width of the transition layer.
    gradient_bound : float
        Measured ``max |grad eta_h|``.
    """

    mesh: Mesh
    inner: SubdomainSpec
    outer: SubdomainSpec
    values: np.ndarray
    distance: float
    gradient_bound: float

    def as_function(self) -> FemFunction:
        return FemFunction(self.mesh, self.values)

    @property
    def support_elements(self) -> np.ndarray:
        return np.flatnonzero((self.values[self.mesh.elements] > 0).any(axis=1))


def build_cutoff(mesh: Mesh, inner: SubdomainSpec, outer: SubdomainSpec) -> CutoffFunction:
    """Nodal interpolant of ``max(0, 1 - dist(x, inner) / delta)``.

    ``delta`` is the gap between the inner region and the complement of the
    outer one; it must be at least ``2 h``.
    """
    delta = _layer_width(inner, outer)
    if not delta >= 2.0 * mesh.h:
        raise ValueError(f"transition layer {delta:.3g} is thinner than 2h = {2 * mesh.h:.3g}")
    inner_r = mark_subdomain(mesh, inner) if inner.resolved_elements is None else inner
    outer_r = mark_subdomain(mesh, outer) if outer.resolved_elements is None else outer
    vals = np.clip(1.0 - _distance_to_region(inner, mesh.vertices) / delta, 0.0, 1.0)
    if len(inner_r.resolved_elements):
        vals[np.unique(mesh.elements[inner_r.resolved_elements])] = 1.0
    eta = FemFunction(mesh, vals)
    bound = float(np.max(np.linalg.norm(eta.element_gradients(), axis=1)))
    return CutoffFunction(mesh, inner_r, outer_r, eta.coefficients, float(delta), bound)


# ---------------------------------------------------------------------------
# analysis probes


def _h1_norm_sq(mesh: Mesh, field, elements=None, order: int = _QUAD_ORDER) -> float:
    ids, bary, X, W = _element_points(mesh, elements, order)
    if hasattr(field, "element_gradients_at"):
        g = field.element_gradients_at(ids, bary)
    else:
        g = np.broadcast_to(field.element_gradients(ids)[:, None, :], X.shape)
    return float(np.sum(np.einsum("pqd,pqd->pq", g, g) * W))


def superapprox_ratio(meshes, v_h_family, inner: SubdomainSpec, outer: SubdomainSpec,
                      t: int) -> list[float]:
    """``||eta v_h - J_h(eta v_h)||_{H^t} / (h^{2-t} ||v_h||_{H^1(omega_eta)})`` per level.

    ``t`` is 0 (``L2`` norm) or 1 (full ``H1`` norm); the cut-off is rebuilt
    on every mesh from the same geometry.
    """
    if t not in (0, 1):
        raise ValueError("t must be 0 or 1")
    out = []
    for mesh, v in zip(meshes, v_h_family):
        cut = build_cutoff(mesh, inner, outer)
        prod = ProductField(cut.as_function(), v)
        J = quasi_interpolant(mesh, prod)
        diff = _Difference(prod, J)
        num = l2_norm(mesh, diff) ** 2
        if t == 1:
            num += _h1_norm_sq(mesh, diff)
        supp = cut.support_elements
        den_sq = l2_norm(mesh, v, supp) ** 2 + _h1_norm_sq(mesh, v, supp)
        den = mesh.h ** (2 - t) * math.sqrt(den_sq)
        out.append(math.sqrt(num) / den if den > 0 else math.nan)
    return out


class _Difference:
    """``a - b`` for a product field ``a`` and a finite element function ``b``."""

    def __init__(self, a: ProductField, b: FemFunction):
        self.a, self.b, self.mesh = a, b, b.mesh

    def element_values(self, ids, bary):
        return self.a.element_values(ids, bary) - self.b.element_values(ids, bary)

    def element_gradients_at(self, ids, bary):
        return self.a.element_gradients_at(ids, bary) - self.b.element_gradients(ids)[:, None, :]


def l2_locality_probe(mesh: Mesh, f, D0: SubdomainSpec, D1: SubdomainSpec,
                      atol: float = 0.0) -> float:
    """``||P f||_{L2(D0)} / ||f||_{L2(Omega)}`` for ``f`` vanishing on ``D1``.

    ``P`` is the ``L2`` projection onto P1 functions with zero boundary values.
    """
    d0 = mark_subdomain(mesh, D0) if D0.resolved_elements is None else D0
    d1 = mark_subdomain(mesh, D1) if D1.resolved_elements is None else D1
    if _layer_width(D0, D1) < 2.0 * mesh.h:
        raise ValueError("dist(D0, boundary of D1) must be at least 2h")
    ids, bary, X, W = _element_points(mesh, d1.resolved_elements)
    if np.any(np.abs(_sample(mesh, f, ids, bary, X)) > atol):
        raise ValueError("f must vanish on D1")
    norm_f = l2_norm(mesh, f)
    if norm_f == 0.0:
        return 0.0
    p = l2_projection(mesh, f, constrained=True)
    return l2_norm(mesh, p, d0.resolved_elements) / norm_f
