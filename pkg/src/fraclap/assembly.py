"""Stiffness, load and mass assembly for P1 elements.

For hat functions extended by zero outside ``Omega`` the bilinear form splits as

    a(phi_i, phi_j) = C/2 * sum_{T, T'} I_{T T'}[i, j]
                      + C * int_Omega phi_i phi_j rho_c

with ``I_{T T'}`` the element-pair double integral of
``(phi_i(x) - phi_i(y)) (phi_j(x) - phi_j(y)) |x - y|^{-d-2s}`` and
``rho_c(x) = int_{R^d minus Omega} |x - y|^{-d-2s} dy`` the exterior weight.

Element pairs are split into four groups:

* touching pairs (shared vertex, edge, or identical), integrated with the
  Duffy-type rules of :mod:`fraclap.quadrature`;
* near disjoint pairs, listed explicitly and integrated with tensor Gauss
  rules whose order depends on ``dist(T, T') / max(h_T, h_T')``;
* far pairs, handled in blocks of elements: the kernel is evaluated on the
  full block of quadrature points (near pairs masked out) and contracted
  with the basis values by matrix products.

The far-field sum over blocks is reduced in a fixed block order, so the
result does not depend on the number of worker threads.
"""

from __future__ import annotations

import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import beta as beta_fn
from scipy.special import betainc, gamma

from . import _kernels as kern
from .mesh import Mesh, boundary_polygon
from .quadrature import (
    adaptive_edge_rule,
    gauss_interval,
    gauss_simplex,
    gauss_triangle,
    singular_pair_rule,
)

DUMP_MAGIC = b"FRLK1"


class AssemblyError(RuntimeError):
    """Raised when an assembled matrix fails its sanity checks."""


def _check_s(s: float, name: str = "s") -> float:
    s = float(s)
    if not 0.0 < s < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {s}")
    return s


def normalization_constant(dim: int, s: float) -> float:
    """``C(d, s) = -2^{2s} Gamma(s + d/2) / (pi^{d/2} Gamma(-s))``."""
    s = _check_s(s)
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    return float(-(4.0 ** s) * gamma(s + 0.5 * dim) / (math.pi ** (0.5 * dim) * gamma(-s)))


@dataclass(frozen=True)
class AssemblyConfig:
    """Quadrature and execution parameters.

    Parameters
    ----------
    singular_order, vertex_order : int
        Gauss points per angular variable for shared-edge and shared-vertex
        pairs.
    identical_order : int
        Gauss points for the angular variable of identical pairs.
    disjoint_order_far, disjoint_order_mid, disjoint_order_near : int
        Per-element exactness degree for disjoint pairs with separation
        ratio ``>= separation_ratio``, ``>= near_ratio`` and below.
    separation_ratio, near_ratio : float
        Thresholds on ``dist(T, T') / max(h_T, h_T')``.
    exterior_edge_base_order : int
        Base Gauss order of the adaptive edge rule for the exterior weight.
    boundary_levels, boundary_grading, boundary_order : int, float, int
        Geometric grading of element rules towards the boundary.
    corner_angle : float
        Boundary vertices where the boundary turns by more than this angle
        (radians) also get grading along the adjacent boundary facets.
    block_size : int
        Elements per block in the far-field loop.
    workers : int
        Worker threads; results are independent of this number.
    check_spd : bool
        Run a Cholesky factorisation of ``K`` after assembly.
    """

    singular_order: int = 12
    vertex_order: int = 10
    identical_order: int = 16
    disjoint_order_far: int = 5
    disjoint_order_mid: int = 6
    disjoint_order_near: int = 14
    separation_ratio: float = 3.0
    near_ratio: float = 1.5
    exterior_edge_base_order: int = 8
    boundary_levels: int = 8
    boundary_grading: float = 0.25
    boundary_order: int = 6
    corner_angle: float = 0.25
    block_size: int = 128
    workers: int = 1
    check_spd: bool = True

    def __post_init__(self):
        orders = (self.singular_order, self.vertex_order, self.identical_order, self.disjoint_order_far,
                  self.disjoint_order_mid, self.disjoint_order_near,
                  self.exterior_edge_base_order, self.boundary_order, self.boundary_levels)
        if min(orders) < 1:
            raise ValueError("all quadrature orders must be >= 1")
        if not (self.separation_ratio > 0 and self.near_ratio > 0):
            raise ValueError("separation ratios must be positive")
        if self.near_ratio > self.separation_ratio:
            raise ValueError("near_ratio must not exceed separation_ratio")
        if not self.corner_angle >= 0.0:
            raise ValueError("corner_angle must be non-negative")
        if not 0.0 < self.boundary_grading < 1.0:
            raise ValueError("boundary_grading must lie in (0, 1)")
        if self.block_size < 1 or self.workers < 1:
            raise ValueError("block_size and workers must be positive")


@dataclass
class StiffnessSystem:
    """Dense Galerkin system over the free vertices.

    Attributes
    ----------
    K : ndarray, shape (n, n)
    F : ndarray, shape (n,)
    free_vertices : ndarray
        Vertex index of every matrix row.
    vertex_to_row : ndarray
        Row of every vertex, ``-1`` for boundary vertices.
    s, C_ds : float
    """

    mesh: Mesh
    K: np.ndarray
    F: np.ndarray
    free_vertices: np.ndarray
    vertex_to_row: np.ndarray
    s: float
    C_ds: float
    timings: dict = field(default_factory=dict)
    cholesky: tuple | None = field(default=None, repr=False)

    @property
    def ndof(self) -> int:
        return len(self.free_vertices)

    @property
    def free_index_map(self) -> dict:
        return {int(v): i for i, v in enumerate(self.free_vertices)}

    def with_load(self, F: np.ndarray) -> "StiffnessSystem":
        F = np.asarray(F, dtype=float)
        if F.shape == (self.mesh.n_vertices,):
            F = F[self.free_vertices]
        if F.shape != (self.ndof,):
            raise ValueError("load vector has the wrong length")
        return StiffnessSystem(self.mesh, self.K, F, self.free_vertices, self.vertex_to_row,
                               self.s, self.C_ds, dict(self.timings), self.cholesky)

    def dump(self, path) -> None:
        write_system_dump(path, self.K, self.F)


# ---------------------------------------------------------------------------
# exterior weight


def _polygon_edges(boundary) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(boundary, Mesh):
        return boundary_polygon(boundary)
    A, B = boundary
    return np.asarray(A, dtype=float), np.asarray(B, dtype=float)


def _edge_frames(A, B):
    E = B - A
    L = np.linalg.norm(E, axis=1)
    tau = E / L[:, None]
    nrm = np.column_stack([tau[:, 1], -tau[:, 0]])
    return L, tau, nrm


def _cos_power_tail(theta, s):
    """``int_{|theta|}^{pi/2} cos^{2s}`` for ``|theta| <= pi/2``."""
    c2 = np.cos(theta) ** 2
    return 0.5 * beta_fn(s + 0.5, 0.5) * betainc(s + 0.5, 0.5, np.clip(c2, 0.0, 1.0))


def _edge_closed_form(X, A, B, s):
    """``int_edge ((y - x) . n) |x - y|^{-2-2s} ds_y`` for matched rows."""
    L, tau, nrm = _edge_frames(A, B)
    delta = np.einsum("nd,nd->n", A - X, nrm)
    t0 = np.einsum("nd,nd->n", A - X, tau)
    t1 = np.einsum("nd,nd->n", B - X, tau)
    ad = np.abs(delta)
    out = np.zeros(len(X))
    ok = ad > 0.0
    ad, t0, t1 = ad[ok], t0[ok], t1[ok]
    th0 = np.arctan2(t0, ad)
    th1 = np.arctan2(t1, ad)
    h0 = _cos_power_tail(th0, s)
    h1 = _cos_power_tail(th1, s)
    full = 0.5 * beta_fn(0.5, s + 0.5)
    # F(th1) - F(th0) with F(th) = sign(th) (full - h(th)), written without cancellation
    diff = np.where(
        th0 >= 0.0, h0 - h1, np.where(th1 <= 0.0, h1 - h0, (full - h1) + (full - h0))
    )
    out[ok] = np.sign(delta[ok]) * ad ** (-2.0 * s) * diff
    return out


def _edge_gauss(X, A, B, s, n):
    L, tau, nrm = _edge_frames(A, B)
    g, w = gauss_interval(n).points[:, 0], gauss_interval(n).weights
    Y = A[:, None, :] + (B - A)[:, None, :] * g[None, :, None]
    D = Y - X[:, None, :]
    r2 = np.einsum("nqd,nqd->nq", D, D)
    dot = np.einsum("nqd,nd->nq", D, nrm)
    kern.kernel_inplace(r2, 1.0 + s)
    return (r2 * dot) @ w * L


_FAR_EDGE_POINTS = 4
_FAR_EDGE_RATIO = 3.0
_MID_EDGE_POINTS = 12
_CLOSED_EDGE_RATIO = 0.5


def _near_edge_pairs(X, A, B, max_ratio):
    """Point/edge pairs with ``dist(x, edge) < max_ratio |edge|`` and their ratios."""
    L = np.linalg.norm(B - A, axis=1)
    hits = cKDTree(X).query_ball_point(0.5 * (A + B), (max_ratio + 0.5) * L)
    ei = np.repeat(np.arange(len(A)), [len(h) for h in hits])
    pi = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits] + [np.zeros(0, np.int64)])
    e = B[ei] - A[ei]
    t = np.clip(np.einsum("nd,nd->n", X[pi] - A[ei], e) / L[ei] ** 2, 0.0, 1.0)
    ratio = np.linalg.norm(X[pi] - A[ei] - t[:, None] * e, axis=1) / L[ei]
    keep = ratio < max_ratio
    return pi[keep], ei[keep], ratio[keep]


def _rho_polygon(X, A, B, s, chunk=4096):
    """Exterior weight at interior points ``X`` of the polygon with edges ``A -> B``."""
    X = np.ascontiguousarray(X, dtype=float)
    L, tau, nrm = _edge_frames(A, B)
    g, w = gauss_interval(_FAR_EDGE_POINTS).points[:, 0], gauss_interval(_FAR_EDGE_POINTS).weights
    Y = (A[:, None, :] + (B - A)[:, None, :] * g[None, :, None]).reshape(-1, 2)
    wy = (L[:, None] * w[None, :]).ravel()
    N = np.repeat(nrm, len(g), axis=0)
    cy = np.einsum("nd,nd->n", Y, N) * wy
    Nw = N * wy[:, None]
    rho = np.empty(len(X))
    buf = np.empty((min(chunk, len(X)), len(Y)))
    for lo in range(0, len(X), chunk):
        hi = min(lo + chunk, len(X))
        R = buf[: hi - lo]
        kern.sq_dist_block(X[lo:hi], Y, R)
        kern.kernel_inplace(R, 1.0 + s)
        rho[lo:hi] = R @ cy - np.einsum("nd,nd->n", R @ Nw, X[lo:hi])
    # replace the three-point value on nearby edges by an accurate one
    pi, ei, ratio = _near_edge_pairs(X, A, B, _FAR_EDGE_RATIO)
    if len(pi):
        approx = _edge_gauss(X[pi], A[ei], B[ei], s, _FAR_EDGE_POINTS)
        exact = np.empty(len(pi))
        close = ratio < _CLOSED_EDGE_RATIO
        exact[close] = _edge_closed_form(X[pi[close]], A[ei[close]], B[ei[close]], s)
        mid = ~close
        exact[mid] = _edge_gauss(X[pi[mid]], A[ei[mid]], B[ei[mid]], s, _MID_EDGE_POINTS)
        np.add.at(rho, pi, exact - approx)
    return rho / (2.0 * s)


def _rho_polygon_adaptive(X, A, B, s, base_order):
    L, tau, nrm = _edge_frames(A, B)
    out = np.zeros(len(X))
    for p, x in enumerate(X):
        total = 0.0
        for e in range(len(A)):
            t0 = float(np.dot(A[e] - x, tau[e]))
            t1 = float(np.dot(B[e] - x, tau[e]))
            delta = float(np.dot(A[e] - x, nrm[e]))
            if delta == 0.0:
                continue
            foot = min(max(0.0, t0), t1) if t0 <= t1 else 0.0
            foot = min(max(foot, t0), t1)
            for a, b in ((foot, t0), (foot, t1)):
                length = abs(b - a)
                if length == 0.0:
                    continue
                dist = math.hypot(delta, a)
                rule = adaptive_edge_rule(dist / length, base_order)
                t = a + (b - a) * rule.points[:, 0]
                vals = delta * (delta * delta + t * t) ** (-1.0 - s)
                total += length * float(np.dot(rule.weights, vals))
        out[p] = total
    return out / (2.0 * s)


def _inside_polygon(X, A, B):
    # even-odd ray casting along +x
    x, y = X[:, 0][:, None], X[:, 1][:, None]
    ax, ay, bx, by = A[:, 0][None], A[:, 1][None], B[:, 0][None], B[:, 1][None]
    crosses = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (y - ay) * (bx - ax) / (by - ay)
    hits = crosses & (x < xint)
    return hits.sum(axis=1) % 2 == 1


def exterior_weight(x, boundary, s: float, config: AssemblyConfig | None = None,
                    method: str = "closed-form") -> np.ndarray | float:
    """Exterior weight ``rho_c(x) = int_{R^d minus Omega} |x - y|^{-d-2s} dy``.

    Parameters
    ----------
    x : array_like
        One point or an array of points strictly inside the domain.
    boundary : Mesh, tuple
        A mesh, a pair ``(a, b)`` of interval endpoints (1D) or a pair of
        arrays ``(A, B)`` with the start and end points of counter-clockwise
        boundary edges (2D).
    s : float
    method : {"closed-form", "adaptive"}
        2D only: closed-form edge integrals (incomplete beta function) with
        Gauss rules for distant edges, or the adaptive edge rule on every edge.
    """
    s = _check_s(s)
    config = config or AssemblyConfig()
    is_1d = (isinstance(boundary, Mesh) and boundary.dim == 1) or (
        not isinstance(boundary, Mesh) and np.ndim(boundary[0]) == 0)
    if is_1d:
        if isinstance(boundary, Mesh):
            lo, hi = float(boundary.vertices.min()), float(boundary.vertices.max())
        else:
            lo, hi = float(boundary[0]), float(boundary[1])
        X = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
        if np.any((X <= lo) | (X >= hi)):
            raise ValueError("exterior_weight needs points strictly inside the interval")
        val = _rho_interval(X, lo, hi, s)
        return float(val[0]) if np.ndim(x) == 0 else val
    A, B = _polygon_edges(boundary)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(_inside_polygon(X, A, B)):
        raise ValueError("exterior_weight needs points strictly inside the polygon")
    if np.any(kern.point_boundary_distance(X, A, B) <= 0.0):
        raise ValueError("exterior_weight is undefined on the boundary")
    if method == "closed-form":
        val = _rho_polygon(X, A, B, s)
    elif method == "adaptive":
        val = _rho_polygon_adaptive(X, A, B, s, config.exterior_edge_base_order)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(val[0]) if np.ndim(x) == 1 else val


def _rho_interval(X, lo, hi, s):
    return ((hi - X) ** (-2.0 * s) + (X - lo) ** (-2.0 * s)) / (2.0 * s)


# ---------------------------------------------------------------------------
# element rules graded towards singular boundary features


def _graded_panels(levels, q, toward_zero):
    """Panel edges on [0, 1] refined geometrically towards 0 (or 1)."""
    pts = np.concatenate([[0.0], q ** np.arange(levels, -1, -1)])
    return pts if toward_zero else np.sort(1.0 - pts)


def _composite(panels, n):
    g = gauss_interval(n)
    x, w = g.points[:, 0], g.weights
    lo, hi = panels[:-1], panels[1:]
    return ((lo[:, None] + (hi - lo)[:, None] * x).ravel(),
            ((hi - lo)[:, None] * w).ravel())


@lru_cache(maxsize=None)
def _duffy_rule(kind, levels, q, n, corners=(False, False)):
    """Barycentric rule on the reference triangle graded at vertex 0 or edge (1, 2).

    ``x = P0 + r ((1 - v) P1 + v P2 - P0)``; ``kind="vertex"`` grades ``r``
    towards 0, ``kind="edge"`` towards 1.  ``corners`` additionally grades
    ``v`` towards 0 and/or 1 (point singularities at ``P1`` / ``P2``).
    """
    r, wr = _composite(_graded_panels(levels, q, kind == "vertex"), n)
    bv, wv = _graded_interval_rule(corners[0], corners[1], levels, q, n, n)
    v = bv[:, 1]
    R, V = np.meshgrid(r, v, indexing="ij")
    W = np.outer(wr * r, wv)
    bary = np.column_stack([1.0 - R.ravel(), (R * (1.0 - V)).ravel(), (R * V).ravel()])
    return bary, W.ravel()


_CHILDREN = (
    ((1, 0, 0), (0.5, 0.5, 0), (0.5, 0, 0.5)),
    ((0.5, 0.5, 0), (0, 1, 0), (0, 0.5, 0.5)),
    ((0.5, 0, 0.5), (0, 0.5, 0.5), (0, 0, 1)),
    ((0, 0.5, 0.5), (0.5, 0, 0.5), (0.5, 0.5, 0)),
)


def _permuted(bary, k):
    out = np.empty_like(bary)
    out[:, [k, (k + 1) % 3, (k + 2) % 3]] = bary
    return out


@lru_cache(maxsize=None)
def _graded_triangle_rule(sing_vertex, sing_edge, levels, q, n, smooth_order, depth=0):
    """Barycentric rule with grading at the flagged vertices / opposite edges.

    ``sing_vertex[k]`` is 0 for a regular vertex, 1 for a boundary vertex
    and 2 for a corner of the boundary; ``sing_edge[k]`` flags the edge
    opposite vertex ``k``.  Weights sum to 1/2.
    """
    edges = [k for k in range(3) if sing_edge[k]]
    edge_verts = {j for k in edges for j in range(3) if j != k}
    lone = [k for k in range(3) if sing_vertex[k] and k not in edge_verts]
    if not edges and not lone:
        rule = gauss_triangle(smooth_order)
        return rule.barycentric(), rule.weights
    if len(edges) == 1 and not lone:
        k = edges[0]
        corners = (sing_vertex[(k + 1) % 3] == 2, sing_vertex[(k + 2) % 3] == 2)
        bary, w = _duffy_rule("edge", levels, q, n, corners)
        return _permuted(bary, k), w
    if not edges and len(lone) == 1:
        bary, w = _duffy_rule("vertex", levels, q, n)
        return _permuted(bary, lone[0]), w
    if depth >= 6:
        k = edges[0] if edges else lone[0]
        bary, w = _duffy_rule("edge" if edges else "vertex", levels, q, n)
        return _permuted(bary, k), w
    pts, wts = [], []
    for child in _CHILDREN:
        V = np.array(child, dtype=float)
        # a child vertex inherits a parent vertex flag, or is a boundary
        # vertex when it lies on a flagged edge
        cv = []
        for row in V:
            flag = max((sing_vertex[k] for k in range(3) if row[k] == 1.0), default=0)
            if any(sing_edge[k] and row[k] == 0.0 for k in range(3)):
                flag = max(flag, 1)
            cv.append(int(flag))
        ce = []
        for k in range(3):
            a, b = V[(k + 1) % 3], V[(k + 2) % 3]
            on = any(sing_edge[j] and a[j] == 0.0 and b[j] == 0.0 for j in range(3))
            ce.append(bool(on))
        cb, cw = _graded_triangle_rule(tuple(cv), tuple(ce), levels, q, n, smooth_order,
                                       depth + 1)
        pts.append(cb @ V)
        wts.append(0.25 * cw)
    return np.vstack(pts), np.concatenate(wts)


@lru_cache(maxsize=None)
def _graded_interval_rule(left, right, levels, q, n, smooth_n):
    """Rule on [0, 1] graded towards flagged endpoints, barycentric columns."""
    if not left and not right:
        g = gauss_interval(smooth_n)
        x, w = g.points[:, 0], g.weights
    elif left and right:
        xl, wl = _composite(_graded_panels(levels, q, True), n)
        x = np.concatenate([0.5 * xl, 1.0 - 0.5 * xl[::-1]])
        w = np.concatenate([0.5 * wl, 0.5 * wl[::-1]])
    else:
        x, w = _composite(_graded_panels(levels, q, left), n)
    return np.column_stack([1.0 - x, x]), w


def boundary_corners(mesh: Mesh, angle: float) -> np.ndarray:
    """Boundary vertices where the boundary turns by more than ``angle`` radians."""
    corner = np.zeros(mesh.n_vertices, dtype=bool)
    if mesh.dim == 1:
        return corner
    F = mesh.boundary_facets
    X = mesh.vertices
    incoming = np.empty(mesh.n_vertices, dtype=np.int64)
    incoming[F[:, 1]] = F[:, 0]
    outgoing = np.empty(mesh.n_vertices, dtype=np.int64)
    outgoing[F[:, 0]] = F[:, 1]
    v = F[:, 0]
    e1 = X[v] - X[incoming[v]]
    e2 = X[outgoing[v]] - X[v]
    turn = np.arctan2(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0], (e1 * e2).sum(axis=1))
    corner[v] = np.abs(turn) > angle
    return corner


def element_boundary_features(mesh: Mesh, corner_angle: float = np.inf
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Vertex flags (0 interior, 1 boundary, 2 corner) and boundary-facet flags.

    Facet flag ``k`` refers to the facet opposite local vertex ``k``.
    """
    E = mesh.elements
    vflag = mesh.boundary_vertex[E].astype(np.int64)
    d = mesh.dim
    if d == 1:
        return vflag, np.zeros(E.shape, dtype=bool)
    vflag[boundary_corners(mesh, corner_angle)[E]] = 2
    bf = {tuple(sorted(f)) for f in mesh.boundary_facets.tolist()}
    eflag = np.zeros(E.shape, dtype=bool)
    for k in range(3):
        a, b = E[:, (k + 1) % 3], E[:, (k + 2) % 3]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        eflag[:, k] = [(int(x), int(y)) in bf for x, y in zip(lo, hi)]
    return vflag, eflag


def boundary_graded_rules(mesh: Mesh, vflag, eflag, config: AssemblyConfig,
                          dist_ratio: np.ndarray | None = None):
    """Group elements by quadrature rule; yields ``(element_ids, bary, weights)``.

    Elements touching flagged features get geometrically graded rules; the
    others get smooth rules whose order grows as ``dist_ratio`` shrinks.
    """
    L, q, n = config.boundary_levels, config.boundary_grading, config.boundary_order
    d = mesh.dim
    keys = {}
    for e in range(mesh.n_elements):
        sv = tuple(int(b) for b in vflag[e])
        se = tuple(bool(b) for b in eflag[e])
        if any(sv) or any(se):
            key = ("graded", sv, se)
        else:
            r = np.inf if dist_ratio is None else dist_ratio[e]
            key = ("smooth", 0 if r >= 6.0 else (1 if r >= 2.0 else 2))
        keys.setdefault(key, []).append(e)
    for key in sorted(keys, key=repr):
        ids = np.array(keys[key], dtype=np.int64)
        if key[0] == "graded":
            _, sv, se = key
            if d == 1:
                bary, w = _graded_interval_rule(bool(sv[0]), bool(sv[1]), L, q, n, 8)
            else:
                bary, w = _graded_triangle_rule(sv, se, L, q, n, 12)
        else:
            tier = key[1]
            order = (8, 12, 12)[tier]
            rule = gauss_simplex(d, order)
            bary, w = rule.barycentric(), rule.weights
            if tier == 2 and d == 2:
                pts, wts = [], []
                for child in _CHILDREN:
                    pts.append(bary @ np.array(child))
                    wts.append(0.25 * w)
                bary, w = np.vstack(pts), np.concatenate(wts)
            elif tier == 2:
                bary = np.vstack([0.5 * bary + [0.5, 0.0], 0.5 * bary + [0.0, 0.5]])
                w = np.concatenate([0.5 * w, 0.5 * w])
        yield ids, bary, w


def _jacobian_factor(mesh: Mesh) -> np.ndarray:
    return mesh.volumes * (2.0 if mesh.dim == 2 else 1.0)


def element_rules(mesh: Mesh, config: AssemblyConfig, elements: np.ndarray | None = None):
    """Element quadrature groups ``(element_ids, bary, weights)`` graded towards the boundary.

    Only elements in ``elements`` (all by default) are returned; weights sum
    to the reference volume, so the physical weight is ``w * 2|T|`` in 2D and
    ``w * |T|`` in 1D.
    """
    vflag, eflag = element_boundary_features(mesh, config.corner_angle)
    E = mesh.elements
    if mesh.dim == 2:
        A, B = boundary_polygon(mesh)
        vdist = kern.point_boundary_distance(np.ascontiguousarray(mesh.vertices), A, B)
    else:
        x = mesh.vertices[:, 0]
        vdist = np.minimum(x - x.min(), x.max() - x)
    ratio = vdist[E].min(axis=1) / mesh.diameters
    keep = np.ones(mesh.n_elements, dtype=bool)
    if elements is not None:
        keep[:] = False
        keep[np.asarray(elements, dtype=np.int64)] = True
    for ids, bary, w in boundary_graded_rules(mesh, vflag, eflag, config, ratio):
        ids = ids[keep[ids]]
        if len(ids):
            yield ids, bary, w


def _exterior_matrix(mesh: Mesh, s: float, dofs: np.ndarray, ndof: int,
                     config: AssemblyConfig) -> np.ndarray:
    """``M_rho[i, j] = int_Omega phi_i phi_j rho_c`` over the rows in ``dofs``."""
    E = mesh.elements
    active = np.flatnonzero((dofs[E] >= 0).any(axis=1))
    if mesh.dim == 2:
        A, B = boundary_polygon(mesh)
    else:
        lo, hi = mesh.vertices.min(), mesh.vertices.max()
    M = np.zeros((ndof, ndof))
    J = _jacobian_factor(mesh)
    for ids, bary, w in element_rules(mesh, config, active):
        step = max(1, 400000 // len(w))
        for lo_ in range(0, len(ids), step):
            chunk = ids[lo_:lo_ + step]
            P = mesh.vertices[E[chunk]]
            X = np.einsum("qa,pad->pqd", bary, P)
            flat = X.reshape(-1, mesh.dim)
            if mesh.dim == 2:
                rho = _rho_polygon(flat, A, B, s)
            else:
                rho = _rho_interval(flat[:, 0], lo, hi, s)
            Wr = rho.reshape(len(chunk), -1) * w[None, :] * J[chunk][:, None]
            local = np.einsum("pq,qa,qb->pab", Wr, bary, bary)
            kern.scatter_local(M, dofs[E[chunk]], local)
    return M


# ---------------------------------------------------------------------------
# element-pair double integrals


def _ordered(fn, tasks, workers):
    """Yield ``fn(task)`` in task order, computing up to ``workers`` ahead."""
    if workers <= 1:
        for t in tasks:
            yield fn(t)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        it = iter(tasks)
        for t in it:
            pending.append(pool.submit(fn, t))
            if len(pending) >= 2 * workers:
                yield pending.pop(0).result()
        for f in pending:
            yield f.result()


def _rule_bary(dim, order):
    rule = gauss_simplex(dim, order)
    return rule.barycentric(), rule.weights


def pair_form_matrix(mesh: Mesh, t: float, dofs: np.ndarray, ndof: int,
                     elements: np.ndarray | None = None,
                     config: AssemblyConfig | None = None,
                     timings: dict | None = None) -> np.ndarray:
    """Matrix of ``(v, w) -> int_R int_R (v(x)-v(y)) (w(x)-w(y)) |x-y|^{-d-2t}``.

    ``R`` is the union of ``elements`` (all elements by default) and
    ``dofs`` maps vertices to matrix rows (``-1`` to skip a vertex).
    """
    t = _check_s(t, "t")
    config = config or AssemblyConfig()
    timings = {} if timings is None else timings
    d = mesh.dim
    nl = d + 1
    sel = np.arange(mesh.n_elements) if elements is None else np.unique(elements)
    m = len(sel)
    dofs = np.asarray(dofs, dtype=np.int64)
    A = np.zeros((ndof, ndof))
    if m == 0:
        return A
    power = 0.5 * (d + 2.0 * t)
    E = mesh.elements[sel]
    P = np.ascontiguousarray(mesh.vertices[E])
    J = _jacobian_factor(mesh)[sel]
    hT = mesh.diameters[sel]
    edofs = dofs[E]

    # --- pair classification
    tic = time.perf_counter()
    selected = np.zeros(mesh.n_elements, dtype=np.bool_)
    selected[sel] = True
    offsets, incident = mesh.vertex_elements
    touch = kern.touching_pairs(mesh.elements, offsets, incident, selected)
    glob_to_loc = -np.ones(mesh.n_elements, dtype=np.int64)
    glob_to_loc[sel] = np.arange(m)
    touch_loc = np.column_stack([glob_to_loc[touch[:, 0]], glob_to_loc[touch[:, 1]]])
    cent = P.mean(axis=1)
    rad = np.linalg.norm(P - cent[:, None, :], axis=2).max(axis=1)
    radius = config.separation_ratio * hT.max() + 2.0 * rad.max()
    cand = cKDTree(cent).query_pairs(radius, output_type="ndarray").astype(np.int64)
    if len(cand):
        cand = np.sort(cand, axis=1)
        codes = cand[:, 0] * m + cand[:, 1]
        tcodes = np.sort(touch_loc, axis=1)
        tcodes = tcodes[:, 0] * m + tcodes[:, 1]
        cand = cand[~np.isin(codes, tcodes)]
        cand = cand[np.argsort(cand[:, 0] * m + cand[:, 1], kind="stable")]
    dist = kern.simplex_distances(P, cand) if len(cand) else np.zeros(0)
    ratio = dist / np.maximum(hT[cand[:, 0]], hT[cand[:, 1]]) if len(cand) else dist
    near = cand[ratio < config.separation_ratio]
    near_ratio = ratio[ratio < config.separation_ratio]
    timings["classify"] = timings.get("classify", 0.0) + time.perf_counter() - tic

    # --- far field in element blocks
    tic = time.perf_counter()
    far_bary, far_w = _rule_bary(d, config.disjoint_order_far)
    nq = len(far_w)
    X = np.einsum("qa,pad->pqd", far_bary, P).reshape(-1, d)
    W = (J[:, None] * far_w[None, :]).ravel()
    pot = np.zeros(m * nq)
    nb = config.block_size
    nblocks = (m + nb - 1) // nb
    masked = np.vstack([np.sort(touch_loc, axis=1), near,
                        np.column_stack([np.arange(m), np.arange(m)])])
    bi_of = masked[:, 0] // nb
    bj_of = masked[:, 1] // nb
    key = bi_of * nblocks + bj_of
    order = np.argsort(key, kind="stable")
    masked, key = masked[order], key[order]
    starts = np.searchsorted(key, np.arange(nblocks * nblocks))
    stops = np.searchsorted(key, np.arange(nblocks * nblocks), side="right")
    Phi = far_bary

    def far_task(bij):
        bi, bj = bij
        ri = slice(bi * nb * nq, min((bi + 1) * nb, m) * nq)
        rj = slice(bj * nb * nq, min((bj + 1) * nb, m) * nq)
        Xi, Xj = X[ri], X[rj]
        R = np.empty((len(Xi), len(Xj)))
        kern.sq_dist_block(Xi, Xj, R)
        k = bi * nblocks + bj
        if stops[k] > starts[k]:
            loc = masked[starts[k]:stops[k]] - np.array([bi * nb, bj * nb])
            kern.mask_pairs(R, loc, nq, bi == bj)
        kern.kernel_inplace(R, power)
        pot_i = R @ W[rj]
        pot_j = W[ri] @ R if bi != bj else None
        R *= W[ri][:, None]
        R *= W[rj][None, :]
        ni, nj = len(Xi) // nq, len(Xj) // nq
        H = (R.reshape(ni * nq * nj, nq) @ Phi).reshape(ni, nq, nj * nl)
        C = np.matmul(Phi.T, H).reshape(ni * nl, nj * nl)
        return bi, bj, ri, rj, pot_i, pot_j, C

    tasks = [(bi, bj) for bi in range(nblocks) for bj in range(bi, nblocks)]
    for bi, bj, ri, rj, pot_i, pot_j, C in _ordered(far_task, tasks, config.workers):
        pot[ri] += pot_i
        if pot_j is not None:
            pot[rj] += pot_j
        C *= -2.0
        rows = edofs[bi * nb:min((bi + 1) * nb, m)].ravel()
        cols = edofs[bj * nb:min((bj + 1) * nb, m)].ravel()
        kern.scatter_add(A, rows, cols, C, bi != bj)
    Wp = (W * pot).reshape(m, nq)
    local = 2.0 * np.einsum("pq,qa,qb->pab", Wp, Phi, Phi)
    kern.scatter_local(A, edofs, local)
    timings["far"] = timings.get("far", 0.0) + time.perf_counter() - tic

    # --- near disjoint pairs
    tic = time.perf_counter()
    tiers = [
        (near_ratio >= config.near_ratio, config.disjoint_order_mid),
        (near_ratio < config.near_ratio, config.disjoint_order_near),
    ]
    for mask, order_ in tiers:
        pairs = near[mask]
        if not len(pairs):
            continue
        bary, w = _rule_bary(d, order_)
        nqt = len(w)
        chunk = max(1, 2_000_000 // (nqt * nqt))

        def near_task(lo, pairs=pairs, bary=bary, w=w, nqt=nqt, chunk=chunk):
            pr = pairs[lo:lo + chunk]
            Xa = np.einsum("qa,pad->pqd", bary, P[pr[:, 0]])
            Xb = np.einsum("qa,pad->pqd", bary, P[pr[:, 1]])
            Wa = J[pr[:, 0]][:, None] * w[None, :]
            Wb = J[pr[:, 1]][:, None] * w[None, :]
            R = np.empty((len(pr), nqt, nqt))
            kern.sq_dist_paired(Xa, Xb, R)
            kern.kernel_inplace(R, power)
            pa = np.einsum("pqr,pr->pq", R, Wb)
            pb = np.einsum("pqr,pq->pr", R, Wa)
            R *= Wa[:, :, None]
            R *= Wb[:, None, :]
            Q = np.matmul(np.matmul(bary.T, R), bary)
            Pa = np.einsum("pq,qa,qb->pab", Wa * pa, bary, bary)
            Pb = np.einsum("pq,qa,qb->pab", Wb * pb, bary, bary)
            loc = np.empty((len(pr), 2 * nl, 2 * nl))
            loc[:, :nl, :nl] = Pa
            loc[:, nl:, nl:] = Pb
            loc[:, :nl, nl:] = -Q
            loc[:, nl:, :nl] = -np.transpose(Q, (0, 2, 1))
            loc *= 2.0
            dd = np.hstack([edofs[pr[:, 0]], edofs[pr[:, 1]]])
            return dd, loc

        for dd, loc in _ordered(near_task, range(0, len(pairs), chunk), config.workers):
            kern.scatter_local(A, dd, loc)
    timings["near"] = timings.get("near", 0.0) + time.perf_counter() - tic

    # --- touching pairs
    tic = time.perf_counter()
    ident = np.column_stack([sel, sel])
    groups = [("identical", ident, 1.0)]
    if d == 1:
        groups.append(("shared-vertex", touch[touch[:, 2] == 1, :2], 2.0))
    else:
        groups.append(("shared-edge", touch[touch[:, 2] == 2, :2], 2.0))
        groups.append(("shared-vertex", touch[touch[:, 2] == 1, :2], 2.0))
    Jall = _jacobian_factor(mesh)
    for case, pairs, factor in groups:
        if not len(pairs):
            continue
        order_ = {"identical": config.identical_order, "shared-edge": config.singular_order,
                  "shared-vertex": config.vertex_order}[case]
        rule = singular_pair_rule(case, order_, t, d, radial_order=1)
        bx, by = rule.barycentric()
        ns = {"identical": nl, "shared-edge": 2, "shared-vertex": 1}[case]
        nu = 2 * nl - ns
        Dm = np.zeros((len(rule), nu))
        Dm[:, :nl] += bx
        Dm[:, :ns] -= by[:, :ns]
        Dm[:, nl:] -= by[:, ns:]
        DD = (Dm[:, :, None] * Dm[:, None, :]).reshape(len(rule), nu * nu)
        oa, ob, union = kern.touching_orders(mesh.elements, np.ascontiguousarray(pairs))
        union = union[:, :nu]
        chunk = max(1, 1_000_000 // len(rule))

        def touch_task(lo, pairs=pairs, oa=oa, ob=ob, union=union, bx=bx, by=by,
                       rule=rule, DD=DD, nu=nu, factor=factor, chunk=chunk):
            sl = slice(lo, lo + chunk)
            ta, tb = pairs[sl, 0], pairs[sl, 1]
            Pa = np.take_along_axis(mesh.vertices[mesh.elements[ta]], oa[sl][:, :, None], axis=1)
            Pb = np.take_along_axis(mesh.vertices[mesh.elements[tb]], ob[sl][:, :, None], axis=1)
            Xa = np.einsum("qa,pad->pqd", bx, Pa)
            Xb = np.einsum("qa,pad->pqd", by, Pb)
            R = np.empty(Xa.shape[:2])
            kern.sq_dist_rows(Xa, Xb, R)
            kern.kernel_inplace(R, power)
            R *= rule.weights[None, :]
            R *= (factor * Jall[ta] * Jall[tb])[:, None]
            loc = (R @ DD).reshape(-1, nu, nu)
            return dofs[union[sl]], loc

        for dd, loc in _ordered(touch_task, range(0, len(pairs), chunk), config.workers):
            kern.scatter_local(A, dd, loc)
    timings["touching"] = timings.get("touching", 0.0) + time.perf_counter() - tic
    A += A.T
    A *= 0.5
    return A


# ---------------------------------------------------------------------------
# public assembly


def free_dof_map(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    free = np.flatnonzero(~mesh.boundary_vertex)
    rows = -np.ones(mesh.n_vertices, dtype=np.int64)
    rows[free] = np.arange(len(free))
    return free, rows


def assemble_stiffness(mesh: Mesh, s: float, config: AssemblyConfig | None = None,
                       workers: int | None = None) -> StiffnessSystem:
    """Dense stiffness matrix of the fractional Laplacian on the free vertices.

    Raises
    ------
    AssemblyError
        If the Cholesky sanity check fails.
    """
    s = _check_s(s)
    config = config or AssemblyConfig()
    if workers is not None:
        config = AssemblyConfig(**{**config.__dict__, "workers": int(workers)})
    free, rows = free_dof_map(mesh)
    n = len(free)
    C = normalization_constant(mesh.dim, s)
    timings: dict = {}
    tic = time.perf_counter()
    K = pair_form_matrix(mesh, s, rows, n, config=config, timings=timings)
    K *= 0.5 * C
    t0 = time.perf_counter()
    M = _exterior_matrix(mesh, s, rows, n, config)
    M += M.T
    M *= 0.5 * C
    K += M
    del M
    timings["exterior"] = time.perf_counter() - t0
    timings["assembly"] = time.perf_counter() - tic
    system = StiffnessSystem(mesh, K, np.zeros(n), free, rows, s, C, timings)
    if config.check_spd and n:
        try:
            system.cholesky = scipy.linalg.cho_factor(K, lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"stiffness matrix is not positive definite: {exc}") from exc
        if np.any(np.diag(K) <= 0):
            raise AssemblyError("non-positive diagonal entry in the stiffness matrix")
    return system


def assemble_load(mesh: Mesh, f, order: int = 6) -> np.ndarray:
    """``F_i = int_Omega f phi_i`` for every vertex, elementwise Gauss rule.

    ``f`` is a number or a vectorised callable ``f(points) -> values``.
    """
    if order < 4:
        raise ValueError("load quadrature order must be at least 4")
    rule = gauss_simplex(mesh.dim, order)
    bary = rule.barycentric()
    P = mesh.vertices[mesh.elements]
    X = np.einsum("qa,pad->pqd", bary, P)
    if callable(f):
        vals = np.asarray(f(X.reshape(-1, mesh.dim)), dtype=float).reshape(X.shape[:2])
    else:
        vals = np.full(X.shape[:2], float(f))
    Wf = vals * rule.weights[None, :] * _jacobian_factor(mesh)[:, None]
    local = Wf @ bary
    F = np.zeros(mesh.n_vertices)
    np.add.at(F, mesh.elements.ravel(), local.ravel())
    return F


def assemble_mass(mesh: Mesh) -> sparse.csr_matrix:
    """Sparse P1 mass matrix over all vertices."""
    nl = mesh.dim + 1
    ref = (np.ones((nl, nl)) + np.eye(nl)) / ((nl) * (nl + 1))
    local = mesh.volumes[:, None, None] * ref[None]
    rows = np.repeat(mesh.elements, nl, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nl)).ravel()
    M = sparse.coo_matrix((local.ravel(), (rows, cols)),
                          shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    M.sum_duplicates()
    return M


def assemble_system(mesh: Mesh, s: float, f, config: AssemblyConfig | None = None,
                    workers: int | None = None) -> StiffnessSystem:
    """Stiffness matrix plus load vector on the free vertices."""
    system = assemble_stiffness(mesh, s, config, workers)
    return system.with_load(assemble_load(mesh, f)[system.free_vertices])


# ---------------------------------------------------------------------------
# binary dump


def write_system_dump(path, K: np.ndarray, F: np.ndarray | None = None) -> None:
    """Write ``FRLK1`` followed by each array as (ndim, shape..., row-major data)."""
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        for arr in (K, F):
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_system_dump(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != DUMP_MAGIC:
        raise ValueError("not a FRLK1 dump")
    pos, out = 5, []
    while pos < len(data):
        (ndim,) = struct.unpack_from("<q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape))
        out.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape))
        pos += 8 * count
    return out
