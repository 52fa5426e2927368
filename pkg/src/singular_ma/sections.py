"""Sections S_h(x) = {y : u(y) < u(x) + p.(y - x) + h} of grid functions.

Sections are node sets.  Their volume is the node count times the cell
volume; the convex hull of the member nodes supplies a second volume, the
John ellipsoid, widths and containment tests.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .convex_core import central_subgradients, default_subgradient, subgradient_extremes
from .ellipsoid import Ellipsoid, convex_hull, direction_grid, john_ellipsoid, widths
from .grid import ConvexGridFunction, GridSpec

log = logging.getLogger(__name__)


def _node(u: ConvexGridFunction, x) -> tuple[int, ...]:
    node = tuple(int(i) for i in x)
    if len(node) != u.grid.dim or not u.grid.mask[node]:
        raise ValueError(f"{node} is not a domain node")
    return node


def collar(grid: GridSpec) -> np.ndarray:
    """Domain nodes within one spacing of the boundary (boundary nodes included)."""
    depth = grid.signed_depth(grid.coords)
    return grid.mask & (grid.boundary | (depth < grid.h * (1 - 1e-9)))


def height_field(u: ConvexGridFunction, node, p) -> np.ndarray:
    """u(y) - u(x) - p.(y - x) at every node (NaN outside)."""
    g = u.grid
    x = g.point(node)
    return u.values - u.values[node] - (g.coords - x) @ np.asarray(p, dtype=float)


@dataclass
class SectionDescriptor:
    base_node: tuple[int, ...]
    base_point: np.ndarray
    slope: np.ndarray
    height: float
    members: np.ndarray  # boolean node mask
    cell_volume: float
    compactly_contained: bool
    _hull: object = field(default=None, repr=False)
    _john: Ellipsoid | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return int(self.members.sum())

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def volume(self) -> float:
        return self.count * self.cell_volume

    def points(self, grid: GridSpec) -> np.ndarray:
        return grid.coords[self.members]

    def hull_for(self, grid: GridSpec):
        if self._hull is None:
            self._hull = convex_hull(self.points(grid))
        return self._hull

    def john_for(self, grid: GridSpec) -> Ellipsoid:
        if self._john is None:
            self._john = john_ellipsoid(self.hull_for(grid).vertices)
        return self._john

    def record(self, grid: GridSpec, hbar: float | None = None) -> dict:
        """JSON-ready summary {x, p, h, volume, hull_volume, semi_lengths, compact, hbar}."""
        out = {"x": self.base_point.tolist(), "p": self.slope.tolist(), "h": self.height,
               "volume": self.volume, "hull_volume": None, "semi_lengths": None,
               "compact": self.compactly_contained, "hbar": hbar}
        if self.count > grid.dim:
            hull = self.hull_for(grid)
            out["hull_volume"] = hull.volume
            if hull.rank == grid.dim:
                out["semi_lengths"] = self.john_for(grid).semi_lengths.tolist()
        return out


def dump_records(records: list[dict]) -> str:
    return json.dumps(records, indent=2, sort_keys=True)


def extract_section(u: ConvexGridFunction, x, p=None, h: float = 0.0, *,
                    check_slope: bool = False) -> SectionDescriptor:
    """Section of height ``h`` at node ``x`` with slope ``p``.

    ``p`` defaults to the smallest-norm subgradient.  With ``check_slope``
    the slope is tested against the discrete subdifferential first.
    """
    if not h > 0:
        raise ValueError("section height must be positive")
    node = _node(u, x)
    g = u.grid
    if p is None:
        p = default_subgradient(u, node)
    elif check_slope and not subgradient_extremes(u, node).contains(p, tol=1e-7):
        raise ValueError("p is not a subgradient at x")
    p = np.asarray(p, dtype=float)
    gap = height_field(u, node, p)
    members = g.mask & (gap < h)
    compact = not bool(np.any(members & collar(g)))
    return SectionDescriptor(node, g.point(node), p, float(h), members, g.cell_volume, compact)


@dataclass(frozen=True)
class MaximalHeight:
    hbar: float
    singular: bool
    slope: np.ndarray
    witness: tuple[int, ...] | None


def maximal_height(u: ConvexGridFunction, x, p=None, *, singular_tol: float = 0.0) -> MaximalHeight:
    """Largest h with S_h(x) compactly contained.

    The section avoids the collar exactly when h does not exceed the
    smallest height of a collar node, so that minimum is h-bar itself (no
    bisection needed).  ``singular`` marks h-bar <= ``singular_tol``.
    """
    node = _node(u, x)
    g = u.grid
    if p is None:
        p = default_subgradient(u, node)
    p = np.asarray(p, dtype=float)
    c = collar(g)
    if c[node]:
        return MaximalHeight(0.0, True, p, node)
    gap = height_field(u, node, p)[c]
    i = int(np.argmin(gap))
    hbar = max(float(gap[i]), 0.0)
    witness = tuple(int(k) for k in np.argwhere(c)[i])
    return MaximalHeight(hbar, hbar <= singular_tol, p, witness)


def hbar_map(u: ConvexGridFunction, nodes=None, *, chunk: int = 512) -> np.ndarray:
    """h-bar at many nodes using centred-difference slopes; NaN elsewhere.

    ``nodes`` is a boolean mask (default: all nodes off the collar).
    """
    g = u.grid
    c = collar(g)
    nodes = (g.mask & ~c) if nodes is None else (np.asarray(nodes, dtype=bool) & g.mask)
    out = np.full(g.counts, np.nan)
    out[nodes & c] = 0.0
    query = np.argwhere(nodes & ~c)
    if len(query) == 0:
        return out
    P = central_subgradients(u)
    Yc = g.coords[c]
    uc = u.values[c]
    for start in range(0, len(query), chunk):
        idx = tuple(query[start:start + chunk].T)
        X = g.coords[idx]
        px = P[idx]
        ux = u.values[idx]
        gaps = uc[None, :] - ux[:, None] - np.einsum("qd,qkd->qk", px, Yc[None, :, :] - X[:, None, :])
        out[idx] = np.maximum(gaps.min(axis=1), 0.0)
    return out


# ---------------------------------------------------------------------------
# restriction to a coordinate hyperplane


def _subgrid(g: GridSpec, axis: int, offset: float) -> GridSpec:
    keep = [a for a in range(g.dim) if a != axis]
    counts = tuple(g.counts[a] for a in keep)
    origin = tuple(g.origin[a] for a in keep)
    spacing = tuple(g.spacing[a] for a in keep)
    center = tuple(g.center[a] for a in keep)
    dz = offset - g.center[axis]
    if g.shape == "box":
        return GridSpec(counts, origin, spacing, "box", center,
                        tuple(g.half_widths[a] for a in keep))
    if g.shape == "ball":
        r = float(np.sqrt(max(g.radius**2 - dz**2, 0.0)))
        return GridSpec(counts, origin, spacing, "ball", center, radius=r)
    if axis == 2:
        return GridSpec(counts, origin, spacing, "ball", center, radius=g.radius)
    r = float(np.sqrt(max(g.radius**2 - dz**2, 0.0)))
    return GridSpec(counts, origin, spacing, "box", center, (r, g.half_height))


@dataclass(frozen=True)
class RestrictionFunction:
    parent: ConvexGridFunction
    axis: int
    offset: float
    function: ConvexGridFunction
    hbar_parent: float

    @property
    def grid(self) -> GridSpec:
        return self.function.grid


def restrict(u: ConvexGridFunction, axis: int | None = None, offset: float = 0.0,
             hbar_parent: float = 0.0) -> RestrictionFunction:
    """Trace of ``u`` on the grid hyperplane {x_axis = offset} (default last axis, 0)."""
    g = u.grid
    if g.dim < 2:
        raise ValueError("restriction needs dimension >= 2")
    axis = g.dim - 1 if axis is None else axis
    k = (offset - g.origin[axis]) / g.spacing[axis]
    if abs(k - round(k)) > 1e-9 or not 0 <= round(k) < g.counts[axis]:
        raise ValueError("offset is not a grid plane")
    vals = np.take(u.values, int(round(k)), axis=axis)
    sub = _subgrid(g, axis, offset)
    if not np.array_equal(np.isfinite(vals), sub.mask):
        # fall back to the bounding box when the domain slice is not a listed shape
        sub = GridSpec(sub.counts, sub.origin, sub.spacing, "box")
        vals = np.where(np.isfinite(vals), vals, np.nan)
        if not np.all(np.isfinite(vals)):
            raise ValueError("hyperplane slice is not a supported sub-domain")
    return RestrictionFunction(u, axis, float(offset), ConvexGridFunction(sub, vals), float(hbar_parent))


def axis_lengths(w: RestrictionFunction, y, h: float, p=None) -> np.ndarray:
    """Doubled John semi-lengths of the section of the restriction, descending."""
    sec = extract_section(w.function, y, p, h)
    pts = sec.points(w.grid)
    if len(pts) == 0:
        raise ValueError("empty section")
    return 2.0 * john_ellipsoid(pts).semi_lengths


def property_F(w: RestrictionFunction, y, h: float, p=None) -> bool:
    """w(y) + p.(0 - y) + h >= h-bar of the parent: the tangent plane at y,
    lifted by h, stays above h-bar at the origin."""
    u = w.function
    node = _node(u, y)
    if p is None:
        p = default_subgradient(u, node)
    yp = u.grid.point(node)
    return bool(u.values[node] - np.dot(p, yp) + h >= w.hbar_parent)


# ---------------------------------------------------------------------------
# geometry of sections


def breadth(u: ConvexGridFunction, x, h: float, p=None, *, directions: int | None = None) -> float:
    """Smallest width of the section hull over a direction grid."""
    sec = extract_section(u, x, p, h)
    if sec.empty:
        return 0.0
    V = sec.hull_for(u.grid).vertices
    return float(widths(V, direction_grid(u.grid.dim, directions)).min())


@dataclass(frozen=True)
class GrowthReport:
    heights: np.ndarray
    ratios: np.ndarray
    flagged: bool


def verify_volume_growth(u: ConvexGridFunction, x, heights, p=None) -> GrowthReport:
    """|S_h| / h^(n/2) over ``heights``.

    Flagged when the ratio trends upward as h decreases (negative log-log
    slope) and gains more than a factor 10 over the range, which is
    evidence against det D^2 u >= lambda > 0.
    """
    node = _node(u, x)
    if p is None:
        p = default_subgradient(u, node)
    hs = np.sort(np.asarray(heights, dtype=float))
    gap = height_field(u, node, p)
    n = u.grid.dim
    vol = np.array([np.sum(u.grid.mask & (gap < h)) * u.grid.cell_volume for h in hs])
    ratio = vol / hs ** (n / 2)
    ok = ratio > 0
    slope = np.polyfit(np.log(hs[ok]), np.log(ratio[ok]), 1)[0] if ok.sum() >= 2 else 0.0
    flagged = bool(slope < 0 and ratio[ok][0] > 10 * ratio[ok][-1])
    return GrowthReport(hs, ratio, flagged)


@dataclass(frozen=True)
class BalancingReport:
    inner_scale: float
    outer_scale: float
    ellipsoid: Ellipsoid


def verify_balancing(u: ConvexGridFunction, x, h: float, p=None) -> BalancingReport:
    """Largest c and smallest C with x + cE0 in S_h(x) and S_h(x) in x + CE0,
    where E0 is the John ellipsoid of S_h(x) moved to the origin."""
    sec = extract_section(u, x, p, h)
    if not sec.compactly_contained:
        raise ValueError("section is not compactly contained")
    g = u.grid
    hull = sec.hull_for(g)
    if hull.rank < g.dim:
        raise ValueError("section is flat on this grid")
    E = sec.john_for(g)
    xb = sec.base_point
    c = float(np.min((hull.b - hull.A @ xb) / E.support(hull.A)))
    moved = Ellipsoid(xb, E.axes, E.semi_lengths, E.rank)
    C = float(np.max(moved.norm(hull.vertices)))
    return BalancingReport(c, C, E)


def verify_engulfing(u: ConvexGridFunction, x, h: float, deltas=None, p=None) -> float:
    """Largest delta on the grid ``deltas`` with S_{delta h}(x) inside the
    1/2-dilation of S_h(x) about x; 0 when none qualifies."""
    node = _node(u, x)
    g = u.grid
    if p is None:
        p = default_subgradient(u, node)
    outer = extract_section(u, node, p, h)
    if not outer.compactly_contained:
        raise ValueError("section is not compactly contained")
    hull = outer.hull_for(g)
    xb = outer.base_point
    gap = height_field(u, node, p)
    deltas = np.arange(0.01, 1.0001, 0.01) if deltas is None else np.sort(np.asarray(deltas, float))
    best = 0.0
    for d in deltas:
        inner = g.coords[g.mask & (gap < d * h)]
        if np.all(hull.contains(xb + 2.0 * (inner - xb))):
            best = float(d)
        else:
            break
    return best


# ---------------------------------------------------------------------------
# Vitali covers


@dataclass(frozen=True)
class Subcover:
    selected: list[int]
    disjoint: bool
    covers: bool


def vitali_balls(centers, radii, factor: float = 5.0, *, check_points=None) -> Subcover:
    """Greedy largest-first disjoint subfamily of balls.

    Every discarded ball meets a kept ball at least as large, so it lies in
    the 3x dilation of that ball; ``factor`` defaults to the classical 5.
    Coverage is verified on ``check_points`` (default: ball centres and
    axis extreme points).
    """
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    R = np.asarray(radii, dtype=float)
    order = np.lexsort((np.arange(len(R)), -R))
    chosen: list[int] = []
    for i in order:
        if all(np.linalg.norm(C[i] - C[j]) >= R[i] + R[j] for j in chosen):
            chosen.append(int(i))
    disjoint = all(np.linalg.norm(C[i] - C[j]) >= R[i] + R[j]
                   for a, i in enumerate(chosen) for j in chosen[a + 1:])
    if check_points is None:
        n = C.shape[1]
        offs = np.vstack([np.zeros(n), np.eye(n), -np.eye(n)])
        check_points = (C[:, None, :] + R[:, None, None] * offs[None]).reshape(-1, n)
    Pt = np.atleast_2d(check_points)
    in_family = np.any(np.linalg.norm(Pt[:, None] - C[None], axis=-1) < R[None] * (1 + 1e-12), axis=1)
    sel = np.array(chosen)
    dist = np.linalg.norm(Pt[:, None] - C[sel][None], axis=-1)
    in_cover = np.any(dist <= factor * R[sel][None] * (1 + 1e-12), axis=1)
    return Subcover(chosen, disjoint, bool(np.all(in_cover[in_family])))


def vitali_sections(u: ConvexGridFunction, nodes, heights, delta: float, p_list=None) -> Subcover:
    """Greedy disjoint subfamily of sections S_{delta h}(x), largest h first,
    whose enlargements S_{h/delta}(x) cover the union of the family."""
    g = u.grid
    nodes = [_node(u, x) for x in nodes]
    hs = np.asarray(heights, dtype=float)
    if p_list is None:
        p_list = [default_subgradient(u, x) for x in nodes]
    gaps = [height_field(u, x, p) for x, p in zip(nodes, p_list)]
    cores = [g.mask & (gp < delta * h) for gp, h in zip(gaps, hs)]
    family = [g.mask & (gp < h) for gp, h in zip(gaps, hs)]
    order = np.lexsort((np.arange(len(hs)), -hs))
    chosen: list[int] = []
    taken = np.zeros(g.counts, dtype=bool)
    for i in order:
        if not np.any(cores[i] & taken):
            chosen.append(int(i))
            taken |= cores[i]
    union = np.any(family, axis=0)
    cover = np.any([g.mask & (gaps[i] < hs[i] / delta) for i in chosen], axis=0)
    disjoint = sum(int(cores[i].sum()) for i in chosen) == int(taken.sum())
    return Subcover(chosen, disjoint, bool(np.all(cover[union])))
