"""Simplicial meshes of the interval (-1, 1), the unit disc and polygons.

Meshes are immutable: refinement returns a new :class:`Mesh` that records
the parent element of every child.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations

import numpy as np

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh.

    Attributes
    ----------
    dim : int
        1 or 2.
    vertices : ndarray, shape (n_vertices, dim)
    elements : ndarray, shape (n_elements, dim + 1)
        Vertex indices, positively oriented.
    boundary_vertex : ndarray of bool, shape (n_vertices,)
    level : int
        Refinement generation.
    domain : str
        ``"interval"``, ``"disc"`` or ``"polygon"``; only ``"disc"`` meshes
        project new boundary vertices onto the unit circle.
    parent : ndarray or None
        Parent element of every element when produced by refinement.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    boundary_vertex: np.ndarray
    level: int = 0
    domain: str = "polygon"
    parent: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, self.dim)
        elems = np.array(self.elements, dtype=np.int64).reshape(-1, self.dim + 1)
        if elems.size and (elems.min() < 0 or elems.max() >= len(verts)):
            raise ValueError("element vertex index out of range")
        elems = _orient(verts, elems)
        bnd = np.array(self.boundary_vertex, dtype=bool)
        if bnd.shape != (len(verts),):
            raise ValueError("boundary_vertex must have one flag per vertex")
        for name, arr in (("vertices", verts), ("elements", elems), ("boundary_vertex", bnd)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.parent is not None:
            par = np.array(self.parent, dtype=np.int64)
            par.setflags(write=False)
            object.__setattr__(self, "parent", par)
        if np.any(self.volumes <= 0.0):
            raise RuntimeError("degenerate element with non-positive volume")

    # -- basic geometry --------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Edge matrices ``[P1 - P0, ..., Pd - P0]`` of every element."""
        P = self.vertices[self.elements]
        return np.transpose(P[:, 1:, :] - P[:, :1, :], (0, 2, 1))

    @cached_property
    def volumes(self) -> np.ndarray:
        dets = _signed_det(self.vertices, self.elements)
        return np.abs(dets) / (1.0 if self.dim == 1 else 2.0)

    @cached_property
    def diameters(self) -> np.ndarray:
        P = self.vertices[self.elements]
        diam = np.zeros(self.n_elements)
        for a, b in combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(P[:, a] - P[:, b], axis=1))
        return diam

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape (ne, dim + 1, dim)."""
        inv = np.linalg.inv(self.jacobians)
        g = np.empty((self.n_elements, self.dim + 1, self.dim))
        g[:, 1:, :] = inv
        g[:, 0, :] = -inv.sum(axis=1)
        return g

    @property
    def area(self) -> float:
        return float(self.volumes.sum())

    # -- topology ---------------------------------------------------------

    @cached_property
    def vertex_elements(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR adjacency ``(offsets, element_ids)`` from vertices to elements."""
        flat = self.elements.ravel()
        owner = np.repeat(np.arange(self.n_elements), self.dim + 1)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return offsets, owner[order]

    def elements_at(self, vertex: int) -> np.ndarray:
        off, ids = self.vertex_elements
        return ids[off[vertex]:off[vertex + 1]]

    @cached_property
    def facets(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique facets (sorted vertex tuples) and how many elements share each."""
        d = self.dim
        local = list(combinations(range(d + 1), d))
        all_f = np.sort(self.elements[:, local].reshape(-1, d), axis=1)
        uniq, counts = np.unique(all_f, axis=0, return_counts=True)
        return uniq, counts

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        """Boundary facets oriented with the outward normal to the left-hand rule.

        In 2D each row ``(a, b)`` is traversed counter-clockwise around the
        domain, so the outward normal of edge ``a -> b`` is ``(dy, -dx)``.
        In 1D each row holds the single boundary vertex.
        """
        d = self.dim
        out = []
        for e, elem in enumerate(self.elements):
            for drop in range(d + 1):
                fac = np.delete(elem, drop)
                out.append((tuple(sorted(fac)), e, drop))
        key = {}
        for fac, e, drop in out:
            key.setdefault(fac, []).append((e, drop))
        bnd = []
        for fac, owners in key.items():
            if len(owners) != 1:
                continue
            e, drop = owners[0]
            elem = self.elements[e]
            if d == 1:
                bnd.append([elem[1 - drop]])
            else:
                # positively oriented element (v0, v1, v2): edge opposite v_k
                # traversed as v_{k+1} -> v_{k+2} is counter-clockwise
                a, b = elem[(drop + 1) % 3], elem[(drop + 2) % 3]
                bnd.append([a, b])
        return np.array(bnd, dtype=np.int64).reshape(-1, d)

    @cached_property
    def free_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex)

    # -- convenience -------------------------------------------------------

    def scaled(self, factor: float) -> "Mesh":
        """Copy with every coordinate multiplied by ``factor``."""
        return replace(self, vertices=self.vertices * factor, domain="polygon", parent=None)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Element index and barycentric coordinates of each point (-1 if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, self.dim)
        from scipy.spatial import cKDTree

        tree = cKDTree(self.centroids)
        k = min(self.n_elements, 16)
        _, cand = tree.query(points, k=k)
        cand = np.atleast_2d(cand).reshape(len(points), -1)
        elem = np.full(len(points), -1)
        bary = np.zeros((len(points), self.dim + 1))
        inv = np.linalg.inv(self.jacobians)
        P0 = self.vertices[self.elements[:, 0]]
        for j in range(cand.shape[1]):
            todo = elem < 0
            if not todo.any():
                break
            c = cand[todo, j]
            lam = np.einsum("nij,nj->ni", inv[c], points[todo] - P0[c])
            full = np.column_stack([1.0 - lam.sum(axis=1), lam])
            ok = full.min(axis=1) >= -1e-12
            idx = np.flatnonzero(todo)[ok]
            elem[idx] = c[ok]
            bary[idx] = full[ok]
        missing = elem < 0
        if missing.any():
            # brute force for points the nearest-centroid search missed
            for i in np.flatnonzero(missing):
                lam = np.einsum("nij,nj->ni", inv, points[i][None, :] - P0)
                full = np.column_stack([1.0 - lam.sum(axis=1), lam])
                hit = np.flatnonzero(full.min(axis=1) >= -1e-12)
                if len(hit):
                    elem[i] = hit[0]
                    bary[i] = full[hit[0]]
        return elem, bary


def _signed_det(vertices, elements):
    P = vertices[elements]
    if P.shape[2] == 1:
        return P[:, 1, 0] - P[:, 0, 0]
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]


def _orient(vertices, elements):
    if len(elements) == 0:
        return elements
    det = _signed_det(vertices, elements)
    elements = elements.copy()
    flip = det < 0
    elements[flip, 0], elements[flip, 1] = elements[flip, 1], elements[flip, 0].copy()
    return elements


# ---------------------------------------------------------------------------
# constructors


def build_interval_mesh(n_elements: int) -> Mesh:
    """Uniform partition of (-1, 1) into ``n_elements`` intervals."""
    if int(n_elements) != n_elements or n_elements < 2:
        raise ValueError(f"n_elements must be an integer >= 2, got {n_elements}")
    n = int(n_elements)
    x = np.linspace(-1.0, 1.0, n + 1)
    elems = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    bnd = np.zeros(n + 1, dtype=bool)
    bnd[[0, -1]] = True
    return Mesh(1, x[:, None], elems, bnd, level=0, domain="interval")


def build_disc_mesh(boundary_segments: int, refinements: int = 0,
                    project_boundary: bool = True) -> Mesh:
    """Fan triangulation of the inscribed ``boundary_segments``-gon of the unit disc.

    ``refinements`` uniform refinements are applied afterwards.
    """
    if int(boundary_segments) != boundary_segments or boundary_segments < 8:
        raise ValueError("boundary_segments must be an integer >= 8")
    n = int(boundary_segments)
    theta = 2.0 * np.pi * np.arange(n) / n
    verts = np.vstack([[0.0, 0.0], np.column_stack([np.cos(theta), np.sin(theta)])])
    k = np.arange(n)
    elems = np.column_stack([np.zeros(n, dtype=int), 1 + k, 1 + (k + 1) % n])
    bnd = np.ones(n + 1, dtype=bool)
    bnd[0] = False
    mesh = Mesh(2, verts, elems, bnd, level=0, domain="disc")
    for _ in range(refinements):
        mesh = refine_uniform(mesh, project_boundary)
    return mesh


def build_rectangle_mesh(nx: int, ny: int, lower=(-1.0, -1.0), upper=(1.0, 1.0)) -> Mesh:
    """Structured triangulation of a rectangle, two triangles per cell."""
    xs = np.linspace(lower[0], upper[0], nx + 1)
    ys = np.linspace(lower[1], upper[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    elems = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            elems += [(a, b, c), (a, c, d)]
    bnd = np.zeros(len(verts), dtype=bool)
    bnd[idx[0, :]] = bnd[idx[-1, :]] = bnd[idx[:, 0]] = bnd[idx[:, -1]] = True
    return Mesh(2, verts, np.array(elems), bnd, level=0, domain="polygon")


def refine_uniform(mesh: Mesh, project_boundary: bool = True) -> Mesh:
    """Bisect every interval / split every triangle at its edge midpoints.

    With ``project_boundary`` the new midpoints of boundary edges of a disc
    mesh are moved radially onto the unit circle.
    """
    if mesh.dim == 1:
        return _refine_1d(mesh)
    E = mesh.elements
    all_edges = np.sort(E[:, [0, 1, 1, 2, 0, 2]].reshape(-1, 3, 2), axis=2).reshape(-1, 2)
    uniq, inverse, counts = np.unique(all_edges, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1, 3)
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    on_bnd = counts == 1
    if project_boundary and mesh.domain == "disc":
        r = np.linalg.norm(mids[on_bnd], axis=1)
        mids[on_bnd] = mids[on_bnd] / r[:, None]
    verts = np.vstack([mesh.vertices, mids])
    bnd = np.concatenate([mesh.boundary_vertex, on_bnd])
    m01, m12, m02 = (nv + inverse[:, k] for k in range(3))
    v0, v1, v2 = E[:, 0], E[:, 1], E[:, 2]
    children = np.stack(
        [
            np.column_stack([v0, m01, m02]),
            np.column_stack([m01, v1, m12]),
            np.column_stack([m02, m12, v2]),
            np.column_stack([m01, m12, m02]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_elements), 4)
    return Mesh(2, verts, children, bnd, level=mesh.level + 1, domain=mesh.domain,
                parent=parent)


def _refine_1d(mesh: Mesh) -> Mesh:
    E = mesh.elements
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[E[:, 0]] + mesh.vertices[E[:, 1]])
    m = nv + np.arange(len(E))
    children = np.stack([np.column_stack([E[:, 0], m]), np.column_stack([m, E[:, 1]])],
                        axis=1).reshape(-1, 2)
    verts = np.vstack([mesh.vertices, mids])
    bnd = np.concatenate([mesh.boundary_vertex, np.zeros(len(E), dtype=bool)])
    parent = np.repeat(np.arange(mesh.n_elements), 2)
    return Mesh(1, verts, children, bnd, level=mesh.level + 1, domain=mesh.domain,
                parent=parent)


# ---------------------------------------------------------------------------
# queries


def shape_regularity(mesh: Mesh) -> float:
    """``max_T diam(T) / |T|^(1/dim)``."""
    return float(np.max(mesh.diameters / mesh.volumes ** (1.0 / mesh.dim)))


@dataclass(frozen=True)
class SubdomainSpec:
    """Geometric region plus the elements resolved on a particular mesh.

    ``kind`` is ``"axis-square"`` (``center``, ``size`` = side length),
    ``"disc"`` (``center``, ``size`` = radius) or ``"element-list"``
    (``elements``).
    """

    kind: str
    center: tuple = (0.0, 0.0)
    size: float = 0.0
    elements: tuple = ()
    resolved_elements: np.ndarray | None = field(default=None, compare=False, repr=False)
    status: str = "unresolved"

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        c = np.asarray(self.center, dtype=float)[: points.shape[1]]
        tol = 1e-12
        if self.kind == "axis-square":
            return np.all(np.abs(points - c) <= 0.5 * self.size + tol, axis=1)
        if self.kind == "disc":
            return np.linalg.norm(points - c, axis=1) <= self.size + tol
        raise ValueError(f"region kind {self.kind!r} has no point predicate")

    @property
    def is_empty(self) -> bool:
        return self.resolved_elements is None or len(self.resolved_elements) == 0


def axis_square(side: float, center=(0.0, 0.0)) -> SubdomainSpec:
    return SubdomainSpec("axis-square", tuple(center), float(side))


def mark_subdomain(mesh: Mesh, spec: SubdomainSpec) -> SubdomainSpec:
    """Resolve ``spec`` to the elements whose vertices all lie in the region."""
    if spec.kind == "element-list":
        elems = np.unique(np.asarray(spec.elements, dtype=np.int64))
    else:
        inside = spec.contains(mesh.vertices)
        elems = np.flatnonzero(inside[mesh.elements].all(axis=1))
    elems.setflags(write=False)
    status = "ok" if len(elems) else "empty"
    if status == "empty":
        warnings.warn(f"subdomain {spec.kind} resolved to no elements", RuntimeWarning,
                      stacklevel=2)
    return replace(spec, resolved_elements=elems, status=status)


def element_patch(mesh: Mesh, element_index: int) -> set[int]:
    """Elements whose closure meets the closure of ``element_index``."""
    if not 0 <= element_index < mesh.n_elements:
        raise IndexError(element_index)
    out: set[int] = set()
    for v in mesh.elements[element_index]:
        out.update(int(e) for e in mesh.elements_at(v))
    return out


def boundary_polygon(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of the boundary edges (2D) in counter-clockwise order."""
    if mesh.dim != 2:
        raise ValueError("boundary polygon is only defined for 2D meshes")
    bf = mesh.boundary_facets
    return mesh.vertices[bf[:, 0]], mesh.vertices[bf[:, 1]]


# ---------------------------------------------------------------------------
# text format


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format (17 significant digits)."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements}\n")
        for v in mesh.vertices:
            fh.write(" ".join(f"{c:.17e}" for c in v) + "\n")
        for e in mesh.elements:
            fh.write(" ".join(str(int(i)) for i in e) + "\n")
        fh.write(" ".join("1" if b else "0" for b in mesh.boundary_vertex) + "\n")


def read_mesh(path, domain: str = "polygon") -> Mesh:
    with open(path) as fh:
        tokens = fh.read().split()
    dim, nv, ne = (int(t) for t in tokens[:3])
    pos = 3
    verts = np.array(tokens[pos:pos + nv * dim], dtype=float).reshape(nv, dim)
    pos += nv * dim
    elems = np.array(tokens[pos:pos + ne * (dim + 1)], dtype=np.int64).reshape(ne, dim + 1)
    pos += ne * (dim + 1)
    flags = np.array(tokens[pos:pos + nv], dtype=int).astype(bool)
    if len(flags) != nv:
        raise ValueError("truncated mesh file: missing boundary flags")
    return Mesh(dim, verts, elems, flags, domain=domain)
