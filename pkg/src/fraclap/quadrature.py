"""Quadrature rules on reference simplices and on pairs of simplices.

Reference elements
------------------
* interval: ``[0, 1]`` with vertices ``0`` and ``1``
* triangle: ``{x >= 0, y >= 0, x + y <= 1}`` with vertices ``(0, 0)``,
  ``(1, 0)``, ``(0, 1)``

Pair rules integrate ``f(x, y)`` over ``T x T'`` for two simplices that
share ``k`` vertices. The shared vertices are always the *leading* local
vertices of both elements (vertex ``0`` for a shared vertex, vertices
``0, 1`` for a shared edge), and the rules are stated in the reference
coordinates of each element.

The touching-pair rules are Duffy-type splittings in which every pair of
points scales linearly with one or more "radial" variables.  Those radial
variables are integrated with Gauss-Jacobi rules whose weight absorbs the
expected power of the integrand, so integrands that are homogeneous of
degree ``2 - d - 2s`` in the radial variable (the P1 fractional kernel
numerator times ``|x - y|^{-d-2s}``) are integrated exactly in the radial
direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

PAIR_CASES = ("identical", "shared-edge", "shared-vertex", "disjoint")


@dataclass(frozen=True)
class QuadRule:
    """Points and weights on a reference domain.

    ``points`` has shape ``(n, dim)``; ``weights`` sum to the volume of the
    reference domain.
    """

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, f) -> float:
        """Apply the rule to a vectorised ``f(points) -> values``."""
        return float(np.dot(self.weights, f(self.points)))

    def barycentric(self) -> np.ndarray:
        return to_barycentric(self.points)


@dataclass(frozen=True)
class PairQuadRule:
    """Rule for double integrals over a pair of reference simplices.

    ``points_x`` and ``points_y`` have shape ``(n, dim)`` and hold the
    reference coordinates in the first and second element respectively.
    """

    case: str
    points_x: np.ndarray
    points_y: np.ndarray
    weights: np.ndarray
    order: int

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.points_x.shape[1]

    def swapped(self) -> "PairQuadRule":
        return PairQuadRule(self.case, self.points_y, self.points_x, self.weights, self.order)

    def barycentric(self) -> tuple[np.ndarray, np.ndarray]:
        return to_barycentric(self.points_x), to_barycentric(self.points_y)


def reference_volume(dim: int) -> float:
    return 1.0 if dim == 1 else 0.5


def to_barycentric(points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of reference points, vertex 0 first."""
    points = np.atleast_2d(points)
    return np.column_stack([1.0 - points.sum(axis=1), points])


# ---------------------------------------------------------------------------
# 1D building blocks


@lru_cache(maxsize=None)
def _legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _jacobi01(n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule on [0, 1] for the weight ``t**beta``."""
    x, w = roots_jacobi(n, 0.0, beta)
    return 0.5 * (x + 1.0), w / 2.0 ** (beta + 1.0)


def gauss_interval(order: int) -> QuadRule:
    """Gauss-Legendre rule with ``order`` nodes on ``[0, 1]``."""
    if not 1 <= order <= 30:
        raise ValueError(f"interval order must be in [1, 30], got {order}")
    x, w = _legendre01(order)
    return QuadRule(x[:, None].copy(), w.copy(), 2 * order - 1)


def gauss_jacobi_interval(n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on ``[0, 1]`` for the weight ``t**beta``, ``beta > -1``."""
    if beta <= -1.0:
        raise ValueError("beta must exceed -1")
    x, w = _jacobi01(n, float(beta))
    return x.copy(), w.copy()


# ---------------------------------------------------------------------------
# triangle rules

_SQ15 = np.sqrt(15.0)
_RADON_A = (6.0 - _SQ15) / 21.0
_RADON_B = (6.0 + _SQ15) / 21.0


def _radon7() -> tuple[np.ndarray, np.ndarray]:
    a, b = _RADON_A, _RADON_B
    pts = np.array(
        [
            [1.0 / 3.0, 1.0 / 3.0],
            [a, a], [1.0 - 2.0 * a, a], [a, 1.0 - 2.0 * a],
            [b, b], [1.0 - 2.0 * b, b], [b, 1.0 - 2.0 * b],
        ]
    )
    wa = (155.0 - _SQ15) / 1200.0
    wb = (155.0 + _SQ15) / 1200.0
    w = np.array([9.0 / 40.0, wa, wa, wa, wb, wb, wb]) * 0.5
    return pts, w


def _collapsed_triangle(n: int) -> tuple[np.ndarray, np.ndarray]:
    # x = u, y = (1 - u) v with Jacobian (1 - u); Gauss-Jacobi in (1 - u)
    t, wt = _jacobi01(n, 1.0)
    v, wv = _legendre01(n)
    u = 1.0 - t
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wt, wv)
    pts = np.column_stack([U.ravel(), ((1.0 - U) * V).ravel()])
    return pts, W.ravel()


@lru_cache(maxsize=None)
def _triangle(order: int) -> tuple[np.ndarray, np.ndarray, int]:
    if order == 1:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]), 1
    if order == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1.0 / 6.0), 2
    if order <= 5:
        pts, w = _radon7()
        return pts, w, 5
    n = (order + 2) // 2
    pts, w = _collapsed_triangle(n)
    return pts, w, 2 * n - 1


def gauss_triangle(order: int) -> QuadRule:
    """Rule on the reference triangle exact for total degree >= ``order``.

    Orders 1, 2 and 3-5 use the centroid, the three-point and Radon's
    seven-point rules; higher orders use a collapsed Gauss-Jacobi product.
    """
    if not 1 <= order <= 20:
        raise ValueError(f"triangle order must be in [1, 20], got {order}")
    pts, w, deg = _triangle(order)
    return QuadRule(pts.copy(), w.copy(), deg)


def gauss_simplex(dim: int, order: int) -> QuadRule:
    """Rule on the reference simplex of dimension ``dim`` exact to degree ``order``."""
    if dim == 1:
        return gauss_interval(max(1, (order + 2) // 2))
    if dim == 2:
        return gauss_triangle(order)
    raise ValueError(f"unsupported dimension {dim}")


# ---------------------------------------------------------------------------
# pair rules


def _sauter_schwab_to_standard(a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    # {0 <= a2 <= a1 <= 1} -> {x, y >= 0, x + y <= 1}, vertex order preserved
    return np.column_stack([a1 - a2, a2])


def _tensor(*rules):
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    w = np.ones_like(grids[0])
    for g in wgrids:
        w = w * g
    return [g.ravel() for g in grids], w.ravel()


def _pair_identical_2d(n, nr, deg):
    (xi, e1, e2, e3), w = _tensor(
        _jacobi01(nr, 3.0 + deg), _jacobi01(nr, 2.0 + deg),
        _jacobi01(nr, 1.0 + deg), _legendre01(n),
    )
    # weight already carries xi^3 e1^2 e2 times rho^deg with rho = xi e1 e2
    w = w * (xi * e1 * e2) ** (-deg)
    maps = [
        ((xi, xi * (1 - e1 + e1 * e2)), (xi * (1 - e1 * e2 * e3), xi * (1 - e1))),
        ((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * (1 - e2 + e2 * e3))),
        ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * (1 - e2))),
    ]
    xs, ys, ws = [], [], []
    for mx, my in maps:
        # each map comes with its mirror image (x and y exchanged)
        for a, b in ((mx, my), (my, mx)):
            xs.append(_sauter_schwab_to_standard(*a))
            ys.append(_sauter_schwab_to_standard(*b))
            ws.append(w)
    return np.vstack(xs), np.vstack(ys), np.concatenate(ws)


def _pair_edge_2d(n, nr, deg):
    (xi, e1, e2, e3), w = _tensor(
        _jacobi01(nr, 3.0 + deg), _jacobi01(nr, 2.0 + deg), _legendre01(n), _legendre01(n)
    )
    w = w * (xi * e1) ** (-deg)
    maps = [
        (((xi, xi * e1 * e3), (xi * (1 - e1 * e2), xi * e1 * (1 - e2))), 1.0),
        (((xi, xi * e1), (xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3))), e2),
        (((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * e2 * e3)), e2),
        (((xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), (xi, xi * e1)), e2),
        (((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * e2)), e2),
    ]
    xs, ys, ws = [], [], []
    for (mx, my), jac in maps:
        xs.append(_sauter_schwab_to_standard(*mx))
        ys.append(_sauter_schwab_to_standard(*my))
        ws.append(w * jac)
    return np.vstack(xs), np.vstack(ys), np.concatenate(ws)


def _pair_vertex_2d(n, nr, deg):
    (xi, e1, e2, e3), w = _tensor(
        _jacobi01(nr, 3.0 + deg), _legendre01(n), _legendre01(n), _legendre01(n)
    )
    w = w * e2 * xi ** (-deg)
    a = _sauter_schwab_to_standard(xi, xi * e1)
    b = _sauter_schwab_to_standard(xi * e2, xi * e2 * e3)
    return np.vstack([a, b]), np.vstack([b, a]), np.concatenate([w, w])


def _pair_identical_1d(n, nr, deg):
    (xi, eta), w = _tensor(_jacobi01(nr, 1.0 + deg), _jacobi01(nr, deg))
    w = w * (xi * eta) ** (-deg)
    x = xi
    y = xi * (1.0 - eta)
    return (np.concatenate([x, y])[:, None], np.concatenate([y, x])[:, None],
            np.concatenate([w, w]))


def _pair_vertex_1d(n, nr, deg):
    (xi, eta), w = _tensor(_jacobi01(nr, 1.0 + deg), _legendre01(n))
    w = w * xi ** (-deg)
    x = xi
    y = xi * eta
    return (np.concatenate([x, y])[:, None], np.concatenate([y, x])[:, None],
            np.concatenate([w, w]))


@lru_cache(maxsize=None)
def _singular_cached(case, order, s, dim, radial_order):
    deg = 2.0 - dim - 2.0 * s
    nr = order if radial_order is None else radial_order
    if dim == 1:
        builders = {"identical": _pair_identical_1d, "shared-vertex": _pair_vertex_1d}
    else:
        builders = {
            "identical": _pair_identical_2d,
            "shared-edge": _pair_edge_2d,
            "shared-vertex": _pair_vertex_2d,
        }
    if case == "disjoint":
        rx = gauss_simplex(dim, order)
        n = len(rx)
        px = np.repeat(rx.points, n, axis=0)
        py = np.tile(rx.points, (n, 1))
        w = np.outer(rx.weights, rx.weights).ravel()
        return px, py, w
    if case not in builders:
        raise ValueError(f"unsupported pair case {case!r} for dim={dim}")
    return builders[case](order, nr, deg)


def singular_pair_rule(
    case: str, order: int, s: float, dim: int, radial_order: int | None = None
) -> PairQuadRule:
    """Pair rule for ``(u(x)-u(y))(v(x)-v(y)) |x-y|^{-dim-2s}``-type integrands.

    Parameters
    ----------
    case : {"identical", "shared-edge", "shared-vertex", "disjoint"}
        Configuration of the element pair.
    order : int
        Gauss points per smooth (angular) variable; for ``"disjoint"`` the
        exactness degree of the per-element rule.
    s : float
        Fractional order in (0, 1); fixes the radial Gauss-Jacobi weights.
    dim : int
        1 or 2.
    radial_order : int, optional
        Gauss-Jacobi points per radial variable, ``order`` by default. One
        point is exact for P1 integrands.
    """
    if not 0.0 < s < 1.0:
        raise ValueError(f"s must lie in (0, 1), got {s}")
    if dim not in (1, 2):
        raise ValueError(f"unsupported dimension {dim}")
    if case not in PAIR_CASES:
        raise ValueError(f"unknown pair case {case!r}")
    if order < 1:
        raise ValueError("order must be positive")
    px, py, w = _singular_cached(case, int(order), float(s), int(dim), radial_order)
    return PairQuadRule(case, px.copy(), py.copy(), w.copy(), int(order))


def adaptive_edge_rule(distance_ratio: float, base_order: int = 8) -> QuadRule:
    """Composite Gauss rule on ``[0, 1]`` graded towards ``t = 0``.

    The nearest point of the edge to the evaluation point is assumed to sit
    at ``t = 0`` (split an edge at the foot point and flip as needed).
    Panels are ``[q^{k+1}, q^k]`` with ratio ``q = 1/2`` down to the size of
    ``distance_ratio``, so the node count grows like ``log(1/distance_ratio)``.
    """
    if distance_ratio <= 0:
        raise ValueError("distance_ratio must be positive")
    x, w = _legendre01(base_order)
    if distance_ratio >= 1.0:
        return QuadRule(x[:, None].copy(), w.copy(), 2 * base_order - 1)
    q = 0.5
    levels = int(np.ceil(np.log(distance_ratio) / np.log(q))) + 2
    edges = np.concatenate([[0.0], q ** np.arange(levels, -1, -1)])
    lo, hi = edges[:-1], edges[1:]
    pts = (lo[:, None] + (hi - lo)[:, None] * x[None, :]).ravel()
    wts = ((hi - lo)[:, None] * w[None, :]).ravel()
    return QuadRule(pts[:, None], wts, 2 * base_order - 1)
