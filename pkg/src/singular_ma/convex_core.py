"""Convex envelopes, subgradients and the Monge-Ampere measure on grids."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from .grid import ConvexGridFunction, GridSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# lower convex envelope


def lower_convex_envelope(raw, grid: GridSpec, *, tol: float | None = None,
                          **meta) -> ConvexGridFunction:
    """Largest convex function below ``raw`` on the in-domain nodes.

    Values that already agree with the envelope to within ``tol`` are kept
    verbatim, which makes the operation exactly idempotent.
    """
    raw = np.asarray(raw, dtype=float).reshape(grid.counts)
    bad = grid.mask & ~np.isfinite(raw)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite input at node {idx}")
    pts = grid.coords[grid.mask]
    z = raw[grid.mask]
    scale = float(np.max(np.abs(z))) + 1.0
    tol = 1e-10 * scale if tol is None else tol

    if grid.dim == 1:
        env = _lower_envelope_1d(pts[:, 0], z)
    else:
        env = _lower_envelope_nd(pts, z)

    env = np.where(np.abs(env - z) <= tol, z, np.minimum(env, z))
    out = np.full(grid.counts, np.nan)
    out[grid.mask] = env
    return ConvexGridFunction(grid, out, certified=True, **meta)


def _lower_envelope_1d(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    order = np.argsort(x)
    xs, zs = x[order], z[order]
    hull: list[int] = []
    for i in range(len(xs)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (xs[b] - xs[a]) * (zs[i] - zs[a]) - (zs[b] - zs[a]) * (xs[i] - xs[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    env_sorted = np.interp(xs, xs[hull], zs[hull])
    env = np.empty_like(env_sorted)
    env[order] = env_sorted
    return env


def _affine_fit(pts, z):
    A = np.column_stack([pts, np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    return A @ coef


def _lower_envelope_nd(pts: np.ndarray, z: np.ndarray) -> np.ndarray:
    lifted = np.column_stack([pts, z])
    fit = _affine_fit(pts, z)
    if np.max(np.abs(fit - z)) <= 1e-12 * (np.max(np.abs(z)) + 1.0):
        return fit
    try:
        hull = ConvexHull(lifted, qhull_options="Qt Qc")
    except QhullError:
        log.info("qhull rejected lifted points; retrying with joggle")
        hull = ConvexHull(lifted, qhull_options="QJ")
    normals = hull.equations[:, :-1]
    offsets = hull.equations[:, -1]
    lower = normals[:, -1] < -1e-12
    env = np.full(len(z), -np.inf)
    # each lower facet is a simplex in x-space; nodes inside it take its plane
    lo_all, hi_all = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi_all - lo_all, 1e-300)
    for simplex, nrm, off in zip(hull.simplices[lower], normals[lower], offsets[lower]):
        verts = pts[simplex]
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        pad = 1e-9 * span
        cand = np.flatnonzero(np.all((pts >= lo - pad) & (pts <= hi + pad), axis=1))
        if cand.size == 0:
            continue
        bary = _barycentric(verts, pts[cand])
        if bary is None:
            continue
        inside = np.all(bary >= -1e-9, axis=1)
        if not inside.any():
            continue
        sel = cand[inside]
        plane = -(pts[sel] @ nrm[:-1] + off) / nrm[-1]
        env[sel] = np.maximum(env[sel], plane)
    missing = ~np.isfinite(env)
    if missing.any():
        # fall back to the max over all lower planes for stragglers
        planes = -(pts[missing] @ normals[lower][:, :-1].T + offsets[lower]) / normals[lower][:, -1]
        env[missing] = planes.max(axis=1)
    return env


def _barycentric(verts: np.ndarray, q: np.ndarray) -> np.ndarray | None:
    T = (verts[1:] - verts[0]).T
    try:
        lam = np.linalg.solve(T, (q - verts[0]).T).T
    except np.linalg.LinAlgError:
        return None
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


# ---------------------------------------------------------------------------
# discrete convexity


def stencil_directions(dim: int) -> list[tuple[int, ...]]:
    """Axis directions and the face diagonals e_i + e_j, e_i - e_j."""
    dirs = []
    for i in range(dim):
        e = [0] * dim
        e[i] = 1
        dirs.append(tuple(e))
    for i, j in itertools.combinations(range(dim), 2):
        for sj in (1, -1):
            e = [0] * dim
            e[i], e[j] = 1, sj
            dirs.append(tuple(e))
    return dirs


def shifted(values: np.ndarray, offset) -> np.ndarray:
    """``values[x + offset]`` with NaN where the shift leaves the array."""
    out = np.full(values.shape, np.nan)
    src, dst = [], []
    for o, n in zip(offset, values.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = values[tuple(src)]
    return out


@dataclass(frozen=True)
class ConvexityVerdict:
    convex: bool
    node: tuple[int, ...] | None = None
    direction: tuple[int, ...] | None = None
    second_difference: float | None = None

    def __bool__(self) -> bool:
        return self.convex


def is_discretely_convex(u: ConvexGridFunction, tol_convex: float | None = None) -> ConvexityVerdict:
    vals = u.values
    if tol_convex is None:
        tol_convex = 1e-9 * (np.nanmax(np.abs(vals)) + 1.0)
    for d in stencil_directions(u.grid.dim):
        d2 = shifted(vals, d) + shifted(vals, tuple(-c for c in d)) - 2.0 * vals
        bad = d2 < -tol_convex  # NaN compares False
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            return ConvexityVerdict(False, idx, d, float(d2[idx]))
    return ConvexityVerdict(True)


# ---------------------------------------------------------------------------
# subgradients


@dataclass(frozen=True)
class Subdifferential:
    """Extreme slopes of the discrete subdifferential at one node."""

    node: tuple[int, ...]
    vertices: np.ndarray
    partial: bool

    def contains(self, p, tol: float = 1e-9) -> bool:
        hull_pts = self.vertices
        if len(hull_pts) == 1:
            return bool(np.allclose(hull_pts[0], p, atol=tol))
        return _in_hull(hull_pts, np.asarray(p, dtype=float), tol)


def _support_constraints(u: ConvexGridFunction, node):
    g = u.grid
    x = g.point(node)
    ux = u.values[node]
    m = g.mask.copy()
    m[node] = False
    Y = g.coords[m] - x
    b = u.values[m] - ux
    return Y, b


def _axis_partial(g: GridSpec, node) -> bool:
    for ax in range(g.dim):
        for step in (-1, 1):
            idx = list(node)
            idx[ax] += step
            if not 0 <= idx[ax] < g.counts[ax] or not g.mask[tuple(idx)]:
                return True
    return False


def subgradient_extremes(u: ConvexGridFunction, node, *, box: float | None = None) -> Subdifferential:
    """Vertices of {p : u(y) >= u(x) + p.(y - x) for all nodes y}.

    At nodes missing an axis neighbour the set is unbounded; it is clipped to
    a box of half-width ``box`` (default: a multiple of the largest observed
    difference quotient) and the result is flagged ``partial``.
    """
    node = tuple(int(i) for i in node)
    g = u.grid
    if not g.mask[node]:
        raise ValueError(f"node {node} is outside the domain")
    Y, b = _support_constraints(u, node)
    partial = _axis_partial(g, node)
    if box is None:
        quot = np.abs(b) / np.maximum(np.linalg.norm(Y, axis=1), 1e-300)
        box = 4.0 * float(quot.max()) + 1.0
    n = g.dim
    A = np.vstack([Y, np.eye(n), -np.eye(n)])
    rhs = np.concatenate([b, np.full(2 * n, box)])
    verts = _polytope_vertices(A, rhs)
    return Subdifferential(node, verts, partial)


def _polytope_vertices(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = A.shape[1]
    norms = np.linalg.norm(A, axis=1)
    res = linprog(
        np.r_[np.zeros(n), -1.0],
        A_ub=np.column_stack([A, norms]),
        b_ub=rhs,
        bounds=[(None, None)] * n + [(0, None)],
        method="highs",
    )
    if not res.success:
        raise RuntimeError("subdifferential is empty; is the function convex?")
    center, radius = res.x[:n], res.x[n]
    scale = max(1.0, float(np.max(np.abs(rhs[-2 * n:]))))
    if radius > 1e-9 * scale:
        hs = HalfspaceIntersection(np.column_stack([A, -rhs]), center)
        return _dedupe(hs.intersections, 1e-10 * scale)
    # flat polytope: collect support points in a fan of directions
    pts = []
    for c in _support_directions(n):
        r = linprog(-c, A_ub=A, b_ub=rhs, bounds=[(None, None)] * n, method="highs")
        if r.success:
            pts.append(r.x)
    return _dedupe(np.array(pts), 1e-9 * scale)


def _support_directions(n: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    k = 16 if n == 2 else 6
    if n == 2:
        t = np.linspace(0, 2 * np.pi, k, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    dirs = [np.array(d, dtype=float) for d in itertools.product((-1, 0, 1), repeat=n) if any(d)]
    return np.array([d / np.linalg.norm(d) for d in dirs])


def _dedupe(P: np.ndarray, tol: float) -> np.ndarray:
    out: list[np.ndarray] = []
    for p in P:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    return np.array(out)


def _in_hull(V: np.ndarray, p: np.ndarray, tol: float) -> bool:
    k = len(V)
    res = linprog(
        np.zeros(k),
        A_eq=np.vstack([V.T, np.ones(k)]),
        b_eq=np.r_[p, 1.0],
        bounds=[(0, None)] * k,
        method="highs",
    )
    if res.success:
        return True
    # tolerance: distance to the hull
    return min_norm_point(V - p) <= tol


def min_norm_point(V: np.ndarray) -> float:
    """Distance from the origin to the convex hull of the rows of ``V``."""
    return float(np.linalg.norm(min_norm_combination(V)))


def min_norm_combination(V: np.ndarray) -> np.ndarray:
    """Point of smallest norm in the convex hull of the rows of ``V``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    k = len(V)
    if k == 1:
        return V[0].copy()
    G = V @ V.T
    res = minimize(
        lambda w: w @ G @ w,
        np.full(k, 1.0 / k),
        jac=lambda w: 2.0 * G @ w,
        bounds=[(0.0, 1.0)] * k,
        constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0,
                      "jac": lambda w: np.ones_like(w)}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    w = np.clip(res.x, 0.0, None)
    w /= w.sum()
    return w @ V


def default_subgradient(u: ConvexGridFunction, node) -> np.ndarray:
    """Smallest-norm slope of the discrete subdifferential at ``node``."""
    return min_norm_combination(subgradient_extremes(u, node).vertices)


def central_subgradients(u: ConvexGridFunction) -> np.ndarray:
    """Centred difference slopes at every node, one-sided where needed.

    For convex data this lies between the one-sided quotients of every axis;
    it is the cheap, vectorised choice used for whole-grid maps.
    """
    g = u.grid
    vals = u.values
    out = np.full(g.counts + (g.dim,), np.nan)
    for ax, s in enumerate(g.spacing):
        e = [0] * g.dim
        e[ax] = 1
        fwd = (shifted(vals, e) - vals) / s
        bwd = (vals - shifted(vals, [-c for c in e])) / s
        both = np.where(np.isnan(fwd), bwd, np.where(np.isnan(bwd), fwd, 0.5 * (fwd + bwd)))
        out[..., ax] = both
    return out


# ---------------------------------------------------------------------------
# Monge-Ampere measure


@dataclass(frozen=True)
class MongeAmpereField:
    grid: GridSpec
    mass: np.ndarray
    total: float
    slope_lo: np.ndarray
    slope_hi: np.ndarray
    resolution: int

    def mass_in(self, region: np.ndarray) -> float:
        return float(self.mass[region].sum())


def _legendre_argmax(U: np.ndarray, xs: list[np.ndarray], ps: list[np.ndarray]):
    """max over nodes of p.x - U(x) on the slope grid, with maximizing node.

    ``U`` carries +inf at excluded nodes.  Axes are eliminated one at a time
    from the last, so the cost is sum over axes of (nodes left) x (slopes).
    Returns the conjugate values and a tuple of index arrays (one per axis)
    of shape ``(len(p_1), ..., len(p_d))``.
    """
    d = U.ndim
    G = -U
    args: list[np.ndarray] = []
    for ax in reversed(range(d)):
        # G has shape (n_1..n_ax, Q_{ax+1}..Q_d); eliminate n_ax
        moved = np.moveaxis(G, ax, 0)  # (n_ax, n_1..n_{ax-1}, Q...)
        pre = moved.shape[1:]
        q = ps[ax]
        best = np.full(pre[:ax] + (len(q),) + pre[ax:], -np.inf)
        arg = np.zeros(best.shape, dtype=np.int32)
        shape_q = (1,) * ax + (len(q),) + (1,) * (len(pre) - ax)
        qv = q.reshape(shape_q)
        for j, xj in enumerate(xs[ax]):
            layer = np.expand_dims(moved[j], ax)
            cand = layer + qv * xj
            upd = cand > best
            best = np.where(upd, cand, best)
            arg[upd] = j
        args.append(arg)
        G = best
    args.reverse()  # args[ax] has shape (n_1..n_{ax-1}, Q_ax..Q_d)
    Qshape = tuple(len(p) for p in ps)
    grids = np.indices(Qshape)
    idx: list[np.ndarray] = []
    for ax in range(d):
        key = tuple(idx) + tuple(grids[ax:])
        idx.append(args[ax][key])
    return G, tuple(idx)


def _slope_box(u: ConvexGridFunction) -> tuple[np.ndarray, np.ndarray]:
    g = u.grid
    lo, hi = np.empty(g.dim), np.empty(g.dim)
    for ax, s in enumerate(g.spacing):
        e = [0] * g.dim
        e[ax] = 1
        q = (shifted(u.values, e) - u.values) / s
        lo[ax], hi[ax] = np.nanmin(q), np.nanmax(q)
    return lo, hi


def boundary_layer(grid: GridSpec, collar: float | None = None) -> np.ndarray:
    """Nodes whose gradient images are treated as unbounded.

    Always contains the boundary nodes.  On curved domains the lattice does
    not resolve the boundary, and nodes within ``collar`` spacings of it pick
    up spurious slopes from directions where no node lies farther out; the
    default collar is 2 spacings there and 0 on boxes.
    """
    if collar is None:
        collar = 0.0 if grid.shape == "box" else 2.0
    layer = grid.boundary.copy()
    if collar > 0:
        layer |= grid.mask & (grid.signed_depth(grid.coords) < collar * grid.h * (1 - 1e-9))
    return layer


def ma_measure(u: ConvexGridFunction, slope_resolution: int = 256, *,
               slope_lo=None, slope_hi=None, collar: float | None = None) -> MongeAmpereField:
    """Gradient-image volume per interior node via a discrete Legendre transform.

    Every cell of a uniform slope grid is assigned to the node maximizing
    p.x - u(x).  Cells won by boundary nodes (or tied with them) carry the
    unbounded boundary subdifferentials and are discarded, so affine data
    has zero mass.  See :func:`boundary_layer` for which nodes count as
    boundary.  Interior subgradients are bounded by the axis difference
    quotients, so the default slope box is their range; a caller-supplied
    box that misses part of that range is expanded to cover it.
    """
    g = u.grid
    q_lo, q_hi = _slope_box(u)
    if slope_lo is None or slope_hi is None:
        lo, hi = q_lo, q_hi
    else:
        lo, hi = np.asarray(slope_lo, float), np.asarray(slope_hi, float)
        if np.any(lo > q_lo) or np.any(hi < q_hi):
            log.info("slope grid misses observed difference quotients; expanding")
            lo, hi = np.minimum(lo, q_lo), np.maximum(hi, q_hi)
    widths = np.maximum(hi - lo, 1e-12 * (1.0 + np.abs(hi) + np.abs(lo)))
    hi = lo + widths
    step = widths / slope_resolution
    ps = [lo[a] + step[a] * (np.arange(slope_resolution) + 0.5) for a in range(g.dim)]
    xs = g.axes()
    layer = boundary_layer(g, collar)
    v_int, where = _legendre_argmax(np.where(g.mask & ~layer, u.values, np.inf), xs, ps)
    v_bnd, _ = _legendre_argmax(np.where(layer, u.values, np.inf), xs, ps)
    scale = float(np.nanmax(np.abs(u.values))) + float(np.max(np.abs(np.r_[lo, hi]))) + 1.0
    won = v_int > v_bnd + 1e-12 * scale

    mass = np.zeros(g.counts)
    np.add.at(mass, tuple(w[won] for w in where), float(np.prod(step)))
    return MongeAmpereField(g, mass, float(mass.sum()), lo, hi, slope_resolution)


# ---------------------------------------------------------------------------
# simple transforms


def add_half_square(u: ConvexGridFunction) -> ConvexGridFunction:
    half_sq = 0.5 * np.sum(u.grid.coords**2, axis=-1)
    return u.with_values(u.values + half_sq)


def discrete_laplacian(u: ConvexGridFunction) -> np.ndarray:
    """Sum of central second differences; NaN where a neighbour is missing."""
    g = u.grid
    out = np.zeros(g.counts)
    for ax, s in enumerate(g.spacing):
        e = [0] * g.dim
        e[ax] = 1
        out += (shifted(u.values, e) + shifted(u.values, [-c for c in e]) - 2 * u.values) / s**2
    return out
