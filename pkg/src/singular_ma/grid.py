"""Rectangular grids over convex domains and grid functions on them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

SHAPES = ("box", "ball", "cylinder")


@dataclass(frozen=True)
class GridSpec:
    """Uniform node grid ``origin + index * spacing`` and a convex domain.

    Domain parameters, all centred at ``center``:

    * ``box``: ``half_widths`` per axis;
    * ``ball``: ``radius``;
    * ``cylinder`` (3-D): ``radius`` of the cross-section in the first two
      coordinates and ``half_height`` along the last one.

    A node belongs to the domain when it lies in the closed domain up to a
    small relative tolerance.  Boundary nodes are domain nodes with an axis
    neighbour outside the domain (or on the box faces); they carry Dirichlet
    data in the solver and are excluded from gradient-image bookkeeping.
    """

    counts: tuple[int, ...]
    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    shape: str = "box"
    center: tuple[float, ...] | None = None
    half_widths: tuple[float, ...] | None = None
    radius: float | None = None
    half_height: float | None = None

    def __post_init__(self):
        dim = len(self.counts)
        if dim not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {dim}")
        if len(self.origin) != dim or len(self.spacing) != dim:
            raise ValueError("origin/spacing length must match counts")
        if any(c < 3 for c in self.counts):
            raise ValueError("at least 3 nodes per axis are required")
        if any(not s > 0 for s in self.spacing):
            raise ValueError("spacing must be positive on every axis")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown domain shape {self.shape!r}")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.center is None:
            mid = tuple(o + 0.5 * (c - 1) * s
                        for o, c, s in zip(self.origin, self.counts, self.spacing))
            object.__setattr__(self, "center", mid)
        if self.shape == "box" and self.half_widths is None:
            hw = tuple(0.5 * (c - 1) * s for c, s in zip(self.counts, self.spacing))
            object.__setattr__(self, "half_widths", hw)
        if self.shape in ("ball", "cylinder") and self.radius is None:
            raise ValueError(f"{self.shape} domain needs a radius")
        if self.shape == "cylinder":
            if dim != 3:
                raise ValueError("cylinder domains are 3-D")
            if self.half_height is None:
                raise ValueError("cylinder domain needs half_height")

    # -- constructors ------------------------------------------------------

    @classmethod
    def box(cls, lo, hi, counts) -> "GridSpec":
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        counts = tuple(np.broadcast_to(counts, lo.shape).tolist())
        spacing = (hi - lo) / (np.array(counts) - 1)
        return cls(counts, tuple(lo), tuple(spacing), "box")

    @classmethod
    def ball(cls, dim: int, n: int, radius: float = 1.0) -> "GridSpec":
        """``n`` nodes per axis spanning ``[-radius, radius]``."""
        s = 2 * radius / (n - 1)
        return cls((n,) * dim, (-radius,) * dim, (s,) * dim, "ball",
                   center=(0.0,) * dim, radius=radius)

    @classmethod
    def cylinder(cls, n: int, radius: float = 1.0, half_height: float = 1.0,
                 nz: int | None = None) -> "GridSpec":
        nz = n if nz is None else nz
        s = 2 * radius / (n - 1)
        sz = 2 * half_height / (nz - 1)
        return cls((n, n, nz), (-radius, -radius, -half_height), (s, s, sz),
                   "cylinder", center=(0.0, 0.0, 0.0), radius=radius,
                   half_height=half_height)

    # -- geometry ----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    @property
    def h(self) -> float:
        """Largest spacing, the resolution scale of the grid."""
        return max(self.spacing)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    def axes(self) -> list[np.ndarray]:
        return [o + s * np.arange(c)
                for o, c, s in zip(self.origin, self.counts, self.spacing)]

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``counts + (dim,)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def signed_depth(self, x) -> np.ndarray:
        """Distance from points to the domain boundary, negative outside."""
        x = np.asarray(x, dtype=float)
        y = x - np.asarray(self.center)
        if self.shape == "box":
            return np.min(np.asarray(self.half_widths) - np.abs(y), axis=-1)
        if self.shape == "ball":
            return self.radius - np.linalg.norm(y, axis=-1)
        radial = self.radius - np.linalg.norm(y[..., :2], axis=-1)
        axial = self.half_height - np.abs(y[..., 2])
        return np.minimum(radial, axial)

    def _tol(self) -> float:
        return 1e-9 * self.h

    @cached_property
    def mask(self) -> np.ndarray:
        """True at nodes in the closed domain."""
        return self.signed_depth(self.coords) >= -self._tol()

    @cached_property
    def boundary(self) -> np.ndarray:
        """Domain nodes that touch the complement along some axis."""
        m = self.mask
        padded = np.pad(m, 1, constant_values=False)
        near_outside = np.zeros_like(m)
        for ax in range(self.dim):
            for step in (-1, 1):
                shifted = np.roll(padded, step, axis=ax)
                near_outside |= ~shifted[tuple(slice(1, -1) for _ in range(self.dim))]
        on_face = np.abs(self.signed_depth(self.coords)) <= self._tol()
        return m & (near_outside | on_face)

    @cached_property
    def interior(self) -> np.ndarray:
        return self.mask & ~self.boundary

    def index_of(self, x) -> tuple[int, ...]:
        """Index of the node nearest to ``x``."""
        x = np.asarray(x, dtype=float)
        idx = np.rint((x - np.asarray(self.origin)) / np.asarray(self.spacing))
        idx = np.clip(idx.astype(int), 0, np.asarray(self.counts) - 1)
        return tuple(int(i) for i in idx)

    def point(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx) * np.asarray(self.spacing)

    def domain_volume(self) -> float:
        if self.shape == "box":
            return float(np.prod(2 * np.asarray(self.half_widths)))
        if self.shape == "ball":
            n = self.dim
            return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * self.radius**n
        return math.pi * self.radius**2 * 2 * self.half_height

    def domain_header(self) -> str:
        if self.shape == "box":
            lo = np.asarray(self.center) - np.asarray(self.half_widths)
            hi = np.asarray(self.center) + np.asarray(self.half_widths)
            return "domain box " + " ".join(_fmt(v) for v in (*lo, *hi))
        if self.shape == "ball":
            return "domain ball " + " ".join(_fmt(v) for v in (*self.center, self.radius))
        return "domain cylinder " + " ".join(
            _fmt(v) for v in (*self.center, self.radius, self.half_height))

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts),
            "origin": list(self.origin),
            "spacing": list(self.spacing),
            "shape": self.shape,
            "center": list(self.center),
            "half_widths": None if self.half_widths is None else list(self.half_widths),
            "radius": self.radius,
            "half_height": self.half_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        kw = dict(d)
        for key in ("counts", "origin", "spacing", "center", "half_widths"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class ConvexGridFunction:
    """Node values of a (presumed) convex function on a :class:`GridSpec`.

    Exterior nodes hold NaN.  ``certified`` is set only by routines that have
    verified discrete convexity.  ``lambda_``, ``Lambda`` and ``K`` record the
    ellipticity bounds and sup-norm bound the function is meant to satisfy.
    """

    grid: GridSpec
    values: np.ndarray
    certified: bool = False
    lambda_: float | None = None
    Lambda: float | None = None
    K: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(self.grid.counts)
        vals[~self.grid.mask] = np.nan
        bad = ~np.isfinite(vals) & self.grid.mask
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"non-finite value at in-domain node {idx}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def sample(cls, grid: GridSpec, func, **kw) -> "ConvexGridFunction":
        """Evaluate ``func`` on node coordinates (last axis = components)."""
        vals = np.full(grid.counts, np.nan)
        vals[grid.mask] = func(grid.coords[grid.mask])
        return cls(grid, vals, **kw)

    def with_values(self, values, **kw) -> "ConvexGridFunction":
        return replace(self, values=values, **kw)

    @property
    def sup_norm(self) -> float:
        return float(np.nanmax(np.abs(self.values)))

    @property
    def bound(self) -> float:
        """Recorded sup-norm bound ``K``, falling back to the measured one."""
        return self.K if self.K is not None else self.sup_norm

    def at(self, x) -> float:
        return float(self.values[self.grid.index_of(x)])

    # -- MAGF1 text format ---------------------------------------------------

    def to_magf(self, path) -> None:
        Path(path).write_text(dumps_magf(self), encoding="utf-8")

    @classmethod
    def from_magf(cls, path) -> "ConvexGridFunction":
        return loads_magf(Path(path).read_text(encoding="utf-8"))


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_magf(u: ConvexGridFunction) -> str:
    g = u.grid
    lines = [
        f"MAGF1 {g.dim} " + " ".join(str(c) for c in g.counts),
        "origin " + " ".join(_fmt(v) for v in g.origin),
        "spacing " + " ".join(_fmt(v) for v in g.spacing),
        g.domain_header(),
    ]
    lines.extend("nan" if not np.isfinite(v) else _fmt(v) for v in u.values.ravel())
    return "\n".join(lines) + "\n"


def loads_magf(text: str) -> ConvexGridFunction:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) < 3 or head[0] != "MAGF1":
        raise ValueError("not a MAGF1 file")
    dim = int(head[1])
    counts = tuple(int(c) for c in head[2 : 2 + dim])
    origin = tuple(float(v) for v in _keyed(lines[1], "origin"))
    spacing = tuple(float(v) for v in _keyed(lines[2], "spacing"))
    dom = _keyed(lines[3], "domain")
    kind, params = dom[0], [float(v) for v in dom[1:]]
    if kind == "box":
        lo, hi = np.array(params[:dim]), np.array(params[dim:])
        grid = GridSpec(counts, origin, spacing, "box", center=tuple((lo + hi) / 2),
                        half_widths=tuple((hi - lo) / 2))
    elif kind == "ball":
        grid = GridSpec(counts, origin, spacing, "ball", center=tuple(params[:dim]),
                        radius=params[dim])
    elif kind == "cylinder":
        grid = GridSpec(counts, origin, spacing, "cylinder", center=tuple(params[:3]),
                        radius=params[3], half_height=params[4])
    else:
        raise ValueError(f"unknown domain kind {kind!r}")
    vals = np.array([float(v) for v in lines[4 : 4 + grid.size]])
    if vals.size != grid.size:
        raise ValueError(f"expected {grid.size} values, found {vals.size}")
    return ConvexGridFunction(grid, vals.reshape(counts))


def _keyed(line: str, key: str) -> list[str]:
    parts = line.split()
    if not parts or parts[0] != key:
        raise ValueError(f"expected '{key}' line, got {line!r}")
    return parts[1:]
