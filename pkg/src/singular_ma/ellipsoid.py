"""Inscribed ellipsoids, hull geometry and widths of point clouds."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Ellipsoid:
    """``center + axes @ diag(semi_lengths) @ (unit ball)``.

    Columns of ``axes`` are orthonormal directions; ``semi_lengths`` are
    sorted in descending order.  ``rank`` below the dimension marks an
    ellipsoid fitted to a flat point set (trailing semi-lengths are 0).
    """

    center: np.ndarray
    axes: np.ndarray
    semi_lengths: np.ndarray
    rank: int
    iterations: int = 0
    gap: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def shape_matrix(self) -> np.ndarray:
        """Q with E = {c + Q^(1/2) z : |z| <= 1}."""
        return self.axes @ np.diag(self.semi_lengths**2) @ self.axes.T

    def norm(self, y) -> np.ndarray:
        """Gauge of ``y - center``; points of E have norm <= 1."""
        z = (np.atleast_2d(y) - self.center) @ self.axes[:, : self.rank]
        return np.linalg.norm(z / self.semi_lengths[: self.rank], axis=-1)

    def support(self, a) -> np.ndarray:
        """max over E of a.(y - center)."""
        a = np.atleast_2d(a)
        return np.sqrt(np.einsum("ij,jk,ik->i", a, self.shape_matrix, a))

    @property
    def volume_factor(self) -> float:
        return float(np.prod(self.semi_lengths))


# ---------------------------------------------------------------------------
# convex hulls


@dataclass(frozen=True)
class Hull:
    """Convex hull of a point cloud as vertices and facet inequalities A y <= b."""

    points: np.ndarray
    vertices: np.ndarray
    A: np.ndarray
    b: np.ndarray
    volume: float
    rank: int

    def contains(self, y, tol: float = 1e-9) -> np.ndarray:
        y = np.atleast_2d(y)
        if self.rank < y.shape[1]:
            raise ValueError("containment needs a full-dimensional hull")
        scale = max(1.0, float(np.max(np.abs(self.points))))
        return np.all(y @ self.A.T <= self.b + tol * scale, axis=1)

    def centroid(self) -> np.ndarray:
        """Centre of mass of the hull (vertex mean for flat hulls)."""
        V = self.vertices
        n = V.shape[1]
        if self.rank < n or len(V) <= n + 1:
            return V.mean(axis=0)
        tri = Delaunay(V)
        simp = V[tri.simplices]
        vol = np.abs(np.linalg.det(simp[:, 1:] - simp[:, :1]))
        return (vol[:, None] * simp.mean(axis=1)).sum(axis=0) / vol.sum()


def _rank(P: np.ndarray, tol: float = 1e-10) -> tuple[int, np.ndarray, np.ndarray]:
    c = P.mean(axis=0)
    if len(P) == 1:
        return 0, c, np.eye(P.shape[1])
    _, s, Vt = np.linalg.svd(P - c, full_matrices=True)
    scale = max(float(s[0]), 1e-300)
    r = int(np.sum(s > tol * scale * max(1.0, np.sqrt(len(P))))) if s[0] > 0 else 0
    return r, c, Vt.T


def convex_hull(points) -> Hull:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    n = P.shape[1]
    r, _, _ = _rank(P)
    if n == 1:
        lo, hi = P[:, 0].min(), P[:, 0].max()
        A = np.array([[1.0], [-1.0]])
        return Hull(P, np.array([[lo], [hi]]) if hi > lo else np.array([[lo]]),
                    A, np.array([hi, -lo]), float(hi - lo), int(hi > lo))
    if r < n:
        return Hull(P, _flat_vertices(P, r), np.zeros((0, n)), np.zeros(0), 0.0, r)
    try:
        ch = ConvexHull(P)
    except QhullError:
        ch = ConvexHull(P, qhull_options="QJ")
    A = ch.equations[:, :-1]
    b = -ch.equations[:, -1]
    return Hull(P, P[ch.vertices], A, b, float(ch.volume), n)


def _flat_vertices(P: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return P[:1]
    _, c, V = _rank(P)
    Z = (P - c) @ V[:, :r]
    if r == 1:
        return P[[np.argmin(Z[:, 0]), np.argmax(Z[:, 0])]]
    return P[ConvexHull(Z).vertices]


# ---------------------------------------------------------------------------
# John ellipsoid


def _centered_mvee(Q: np.ndarray, max_iter: int, gap_tol: float):
    """Origin-centred minimum-volume ellipsoid containing the rows of ``Q``.

    Khachiyan's algorithm with Todd-Yildirim away steps on the weights of
    the D-optimal design problem.  Returns (X, iterations, gap) with the
    ellipsoid {z : z^T X^{-1} z <= n}.
    """
    m, n = Q.shape
    u = np.full(m, 1.0 / m)
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        X = (Q * u[:, None]).T @ Q
        kappa = np.einsum("ij,jk,ik->i", Q, np.linalg.inv(X), Q)
        j = int(np.argmax(kappa))
        gap = kappa[j] / n - 1.0
        if gap <= gap_tol:
            break
        act = np.flatnonzero(u > 0)
        k = act[np.argmin(kappa[act])]
        if kappa[j] - n >= n - kappa[k]:
            step = (kappa[j] / n - 1.0) / (kappa[j] - 1.0)
            u *= 1.0 - step
            u[j] += step
        else:
            # away step: shift weight off the least binding point
            drop = u[k] / (1.0 - u[k])
            step = drop if kappa[k] <= 1.0 else min((1.0 - kappa[k] / n) / (kappa[k] - 1.0), drop)
            u *= 1.0 + step
            u[k] -= step
    X = (Q * u[:, None]).T @ Q
    return X, it, max(float(gap), 0.0)


def john_ellipsoid(points, *, max_iter: int = 2000, gap_tol: float = 1e-8,
                   center=None) -> Ellipsoid:
    """Largest ellipsoid inside the hull of ``points``, centred at its centroid.

    With the centre fixed, an ellipsoid E lies in the polytope P exactly
    when the polar P° lies in the polar E°; so E is the polar of the
    minimum-volume centred ellipsoid around the facet normals a_i/(b_i - a_i c).
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    n = P.shape[1]
    hull = convex_hull(P)
    if hull.rank < n:
        return _flat_john(P, hull.rank, max_iter, gap_tol)
    if n == 1:
        lo, hi = hull.vertices[0, 0], hull.vertices[-1, 0]
        return Ellipsoid(np.array([(lo + hi) / 2]), np.eye(1), np.array([(hi - lo) / 2]), 1)
    c = hull.centroid() if center is None else np.asarray(center, dtype=float)
    slack = hull.b - hull.A @ c
    if np.any(slack <= 0):
        raise ValueError("centre is not interior to the hull")
    Qp = hull.A / slack[:, None]
    X, it, gap = _centered_mvee(Qp, max_iter, gap_tol)
    w, V = np.linalg.eigh(n * X)
    semi = 1.0 / np.sqrt(w)
    order = np.argsort(-semi)
    return Ellipsoid(c, V[:, order], semi[order], n, it, gap)


def _flat_john(P: np.ndarray, r: int, max_iter: int, gap_tol: float) -> Ellipsoid:
    n = P.shape[1]
    _, c, V = _rank(P)
    if r == 0:
        return Ellipsoid(P[0].copy(), np.eye(n), np.zeros(n), 0)
    Z = (P - c) @ V[:, :r]
    sub = john_ellipsoid(Z, max_iter=max_iter, gap_tol=gap_tol)
    axes = np.column_stack([V[:, :r] @ sub.axes, V[:, r:]])
    semi = np.concatenate([sub.semi_lengths, np.zeros(n - r)])
    return Ellipsoid(c + V[:, :r] @ sub.center, axes, semi, r, sub.iterations, sub.gap)


def sandwich_factor(E: Ellipsoid, points) -> float:
    """Smallest s with hull(points) inside center + s (E - center)."""
    return float(np.max(E.norm(points)))


# ---------------------------------------------------------------------------
# widths


@lru_cache(maxsize=8)
def direction_grid(dim: int, count: int | None = None) -> np.ndarray:
    """Unit directions: ``count`` (default 720) on the circle in 2-D, an
    icosphere with 2562 vertices in 3-D (one per antipodal pair is not
    enforced; widths are symmetric anyway)."""
    if dim == 1:
        return np.array([[1.0]])
    if dim == 2:
        t = np.linspace(0.0, 2 * np.pi, count or 720, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    if dim == 3:
        return _icosphere(4 if count is None else _icosphere_level(count))
    raise ValueError("widths are implemented for dimensions 1 to 3")


def _icosphere_level(count: int) -> int:
    for lvl in range(8):
        if 10 * 4**lvl + 2 >= count:
            return lvl
    return 7


def _icosphere(level: int) -> np.ndarray:
    t = (1 + 5**0.5) / 2
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        F = [f for a, b, c in F for f in
             ((a, mid(a, b), mid(a, c)), (b, mid(b, c), mid(a, b)),
              (c, mid(a, c), mid(b, c)), (mid(a, b), mid(b, c), mid(a, c)))]
    return np.array(verts)


def widths(points, directions) -> np.ndarray:
    P = np.atleast_2d(points)
    proj = P @ np.asarray(directions).T
    return proj.max(axis=0) - proj.min(axis=0)


def min_width(points, dim: int | None = None, count: int | None = None) -> float:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    V = convex_hull(P).vertices
    return float(widths(V, direction_grid(dim or P.shape[1], count)).min())

