"""Compiled inner loops shared by assembly and norm evaluation.

Transcendental functions are left to numpy (vectorised libm); these loops
only do arithmetic, masking and scattering.
"""

from __future__ import annotations

import numba
import numpy as np

_JIT = dict(nogil=True, cache=True)


@numba.njit(**_JIT)
def sq_dist_block(X, Y, out):
    """``out[a, b] = |X[a] - Y[b]|^2``."""
    n, m, d = X.shape[0], Y.shape[0], X.shape[1]
    for a in range(n):
        for b in range(m):
            acc = 0.0
            for k in range(d):
                t = X[a, k] - Y[b, k]
                acc += t * t
            out[a, b] = acc


@numba.njit(**_JIT)
def sq_dist_paired(X, Y, out):
    """``out[p, a, b] = |X[p, a] - Y[p, b]|^2`` for batches of point sets."""
    for p in range(X.shape[0]):
        for a in range(X.shape[1]):
            for b in range(Y.shape[1]):
                acc = 0.0
                for k in range(X.shape[2]):
                    t = X[p, a, k] - Y[p, b, k]
                    acc += t * t
                out[p, a, b] = acc


@numba.njit(**_JIT)
def sq_dist_rows(X, Y, out):
    """``out[p, q] = |X[p, q] - Y[p, q]|^2``."""
    for p in range(X.shape[0]):
        for q in range(X.shape[1]):
            acc = 0.0
            for k in range(X.shape[2]):
                t = X[p, q, k] - Y[p, q, k]
                acc += t * t
            out[p, q] = acc


@numba.njit(**_JIT)
def mask_pairs(R2, pairs, nq, symmetric):
    """Set the ``nq x nq`` sub-blocks of listed local element pairs to ``inf``."""
    inf = np.inf
    for k in range(pairs.shape[0]):
        i0 = pairs[k, 0] * nq
        j0 = pairs[k, 1] * nq
        for a in range(nq):
            for b in range(nq):
                R2[i0 + a, j0 + b] = inf
                if symmetric:
                    R2[j0 + b, i0 + a] = inf


@numba.njit(**_JIT)
def scatter_add(A, rows, cols, block, transpose_too):
    """``A[rows[a], cols[b]] += block[a, b]`` skipping negative indices."""
    for a in range(block.shape[0]):
        ra = rows[a]
        if ra < 0:
            continue
        for b in range(block.shape[1]):
            cb = cols[b]
            if cb < 0:
                continue
            v = block[a, b]
            A[ra, cb] += v
            if transpose_too:
                A[cb, ra] += v


@numba.njit(**_JIT)
def scatter_local(A, dofs, local):
    """Add small dense element/pair matrices ``local[p]`` at ``dofs[p]``."""
    for p in range(local.shape[0]):
        for a in range(local.shape[1]):
            ra = dofs[p, a]
            if ra < 0:
                continue
            for b in range(local.shape[2]):
                cb = dofs[p, b]
                if cb < 0:
                    continue
                A[ra, cb] += local[p, a, b]


@numba.njit(**_JIT)
def touching_pairs(elements, offsets, incident, selected):
    """Unordered pairs ``(T, T')``, ``T < T'``, sharing at least one vertex.

    Returns an array with columns ``T, T', shared_count``.
    """
    ne = elements.shape[0]
    nloc = elements.shape[1]
    cap = 64
    out = np.empty((cap, 3), dtype=np.int64)
    n = 0
    mark = -np.ones(ne, dtype=np.int64)
    for t in range(ne):
        if not selected[t]:
            continue
        for a in range(nloc):
            v = elements[t, a]
            for k in range(offsets[v], offsets[v + 1]):
                u = incident[k]
                if u <= t or not selected[u] or mark[u] == t:
                    continue
                mark[u] = t
                shared = 0
                for b in range(nloc):
                    for c in range(nloc):
                        if elements[t, b] == elements[u, c]:
                            shared += 1
                if n == out.shape[0]:
                    grown = np.empty((2 * n, 3), dtype=np.int64)
                    grown[:n] = out[:n]
                    out = grown
                out[n, 0] = t
                out[n, 1] = u
                out[n, 2] = shared
                n += 1
    return out[:n].copy()


@numba.njit(**_JIT)
def _seg_dist(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    ll = ex * ex + ey * ey
    t = ((px - ax) * ex + (py - ay) * ey) / ll
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    dx = px - ax - t * ex
    dy = py - ay - t * ey
    return np.sqrt(dx * dx + dy * dy)


@numba.njit(**_JIT)
def simplex_distances(P, pairs):
    """Euclidean distance between disjoint simplices ``P[T]`` and ``P[T']``."""
    n = pairs.shape[0]
    out = np.empty(n)
    d = P.shape[2]
    for k in range(n):
        t = pairs[k, 0]
        u = pairs[k, 1]
        if d == 1:
            a0 = min(P[t, 0, 0], P[t, 1, 0])
            a1 = max(P[t, 0, 0], P[t, 1, 0])
            b0 = min(P[u, 0, 0], P[u, 1, 0])
            b1 = max(P[u, 0, 0], P[u, 1, 0])
            out[k] = max(0.0, max(a0, b0) - min(a1, b1))
            continue
        best = np.inf
        for side in range(2):
            p = t if side == 0 else u
            q = u if side == 0 else t
            for a in range(3):
                for e in range(3):
                    b = (e + 1) % 3
                    dist = _seg_dist(P[p, a, 0], P[p, a, 1], P[q, e, 0], P[q, e, 1],
                                     P[q, b, 0], P[q, b, 1])
                    if dist < best:
                        best = dist
        out[k] = best
    return out


def kernel_inplace(r2: np.ndarray, power: float) -> np.ndarray:
    """Overwrite squared distances ``r2`` with ``r2 ** (-power)``.

    ``inf`` entries become exactly 0, which is how masked pairs drop out.
    """
    if power == 1.5:
        root = np.sqrt(r2)
        r2 *= root
        np.reciprocal(r2, out=r2)
    elif power == 1.0:
        np.reciprocal(r2, out=r2)
    else:
        np.log(r2, out=r2)
        r2 *= -power
        np.exp(r2, out=r2)
    return r2


@numba.njit(**_JIT)
def touching_orders(elements, pairs):
    """Local vertex orders putting shared vertices first in both elements.

    Returns ``(order_a, order_b, union)`` where ``union`` lists the shared
    vertices, then the rest of the first element, then the rest of the
    second element (global vertex ids).
    """
    n = pairs.shape[0]
    nloc = elements.shape[1]
    oa = np.empty((n, nloc), dtype=np.int64)
    ob = np.empty((n, nloc), dtype=np.int64)
    union = np.empty((n, 2 * nloc), dtype=np.int64)
    for k in range(n):
        t = pairs[k, 0]
        u = pairs[k, 1]
        shared = np.empty(nloc, dtype=np.int64)
        ns = 0
        for a in range(nloc):
            for b in range(nloc):
                if elements[t, a] == elements[u, b]:
                    shared[ns] = elements[t, a]
                    ns += 1
        shared[:ns] = np.sort(shared[:ns])
        nu = 0
        for i in range(ns):
            union[k, nu] = shared[i]
            nu += 1
            for a in range(nloc):
                if elements[t, a] == shared[i]:
                    oa[k, i] = a
                if elements[u, a] == shared[i]:
                    ob[k, i] = a
        ia = ns
        ib = ns
        for a in range(nloc):
            v = elements[t, a]
            found = False
            for i in range(ns):
                if shared[i] == v:
                    found = True
            if not found:
                oa[k, ia] = a
                ia += 1
                union[k, nu] = v
                nu += 1
        for a in range(nloc):
            v = elements[u, a]
            found = False
            for i in range(ns):
                if shared[i] == v:
                    found = True
            if not found:
                ob[k, ib] = a
                ib += 1
                union[k, nu] = v
                nu += 1
        for i in range(nu, 2 * nloc):
            union[k, i] = -1
    return oa, ob, union


@numba.njit(**_JIT)
def point_boundary_distance(X, A, B):
    out = np.empty(X.shape[0])
    for p in range(X.shape[0]):
        best = np.inf
        for e in range(A.shape[0]):
            d = _seg_dist(X[p, 0], X[p, 1], A[e, 0], A[e, 1], B[e, 0], B[e, 1])
            if d < best:
                best = d
        out[p] = best
    return out
