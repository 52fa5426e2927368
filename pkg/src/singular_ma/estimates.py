"""Integral estimates on computed solutions.

Fields are node arrays (NaN off the domain) integrated with midpoint
quadrature: each node carries the volume of its cell, optionally scaled by
a region weight in [0, 1].
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .convex_core import add_half_square, central_subgradients, discrete_laplacian, ma_measure
from .grid import ConvexGridFunction, GridSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# regions and fields


def ball_region(grid: GridSpec, radius: float = 0.5, center=None) -> np.ndarray:
    """Weights 1 on nodes of the closed ball, 0 elsewhere (default B_{1/2})."""
    c = np.asarray(grid.center if center is None else center, dtype=float)
    d = np.linalg.norm(grid.coords - c, axis=-1)
    return (grid.mask & (d <= radius * (1 + 1e-12))).astype(float)


def box_region(grid: GridSpec, lo, hi) -> np.ndarray:
    """Cell weights for the box [lo, hi]: nodes on a face count 1/2 per face."""
    X = grid.coords
    w = np.ones(grid.counts)
    for ax in range(grid.dim):
        x = X[..., ax]
        tol = 1e-9 * grid.spacing[ax]
        inside = (x > lo[ax] + tol) & (x < hi[ax] - tol)
        face = (np.abs(x - lo[ax]) <= tol) | (np.abs(x - hi[ax]) <= tol)
        w *= np.where(inside, 1.0, np.where(face, 0.5, 0.0))
    return w * grid.mask


def laplacian_field(u: ConvexGridFunction) -> np.ndarray:
    """Discrete Laplacian at interior nodes, NaN elsewhere."""
    lap = discrete_laplacian(u)
    lap[~u.grid.interior] = np.nan
    return lap


def _weights(field_: np.ndarray, grid: GridSpec, region) -> np.ndarray:
    w = grid.cell_volume * (np.ones(grid.counts) if region is None else np.asarray(region, float))
    return np.where(np.isfinite(field_), w, 0.0)


# ---------------------------------------------------------------------------
# level integrals and Orlicz-type integrals


def level_integral(delta_field: np.ndarray, t: float, grid: GridSpec, region=None) -> float:
    """Integral of the field over {field > t} (t >= 0)."""
    if t < 0:
        raise ValueError("level must be non-negative")
    f = np.nan_to_num(delta_field, nan=0.0)
    w = _weights(delta_field, grid, region)
    sel = f > t
    return math.fsum((f[sel] * w[sel]).tolist())


def level_count(delta_field: np.ndarray, t: float, region=None) -> int:
    f = np.nan_to_num(delta_field, nan=-np.inf)
    sel = f > t
    if region is not None:
        sel &= np.asarray(region) > 0
    return int(sel.sum())


def dyadic_levels(delta_field: np.ndarray, region=None, min_nodes: int = 50, j_max: int = 60) -> np.ndarray:
    """t = 2^j, j = 0..J, with J the last level whose set still holds ``min_nodes`` nodes."""
    ts = []
    for j in range(j_max + 1):
        t = 2.0**j
        if level_count(delta_field, t, region) < min_nodes:
            break
        ts.append(t)
    return np.array(ts)


def orlicz_integral(delta_field: np.ndarray, p: float, grid: GridSpec, region=None) -> float:
    """Integral of f (log(1 + f))^p with f the field clipped below at 0."""
    if p < 0:
        raise ValueError("exponent must be non-negative")
    f = np.maximum(np.nan_to_num(delta_field, nan=0.0), 0.0)
    w = _weights(delta_field, grid, region)
    integrand = f * np.log1p(f) ** p if p > 0 else f
    return math.fsum((integrand * w).ravel().tolist())


def layer_cake_orlicz(delta_field: np.ndarray, q: float, grid: GridSpec, region=None,
                      points: int = 4000) -> float:
    """The same integral written as int_0^inf psi'(t) L(t) dt with
    psi(t) = log(1 + t)^q and L the level integral; trapezoid rule in log t."""
    f = np.maximum(np.nan_to_num(delta_field, nan=0.0), 0.0)
    w = _weights(delta_field, grid, region)
    pos = f > 0
    if not pos.any():
        return 0.0
    vals, wts = f[pos], w[pos]
    order = np.argsort(vals)
    vals, wts = vals[order], wts[order]
    tail = np.cumsum((vals * wts)[::-1])[::-1]  # L(t) for t just below vals[i]
    lo, hi = max(vals.min() * 1e-6, 1e-12), vals.max()
    ts = np.geomspace(lo, hi, points)
    idx = np.searchsorted(vals, ts, side="right")
    L = np.where(idx < len(vals), tail[np.minimum(idx, len(vals) - 1)], 0.0)
    dpsi = q * np.log1p(ts) ** (q - 1) / (1 + ts)
    g = dpsi * L * ts  # dt = t d(log t)
    head = math.fsum((vals * wts).tolist()) * np.log1p(lo) ** q  # psi(lo) L(0)
    return float(np.trapezoid(g, np.log(ts)) + head)


# ---------------------------------------------------------------------------
# fits and reports


@dataclass(frozen=True)
class DecayFit:
    log_exponent: float  # epsilon with series ~ C / |log t|^epsilon
    log_residual: float
    power_exponent: float  # epsilon with series ~ C t^(-epsilon)
    power_residual: float
    points: int
    dropped: int


def _lsq(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), res


def decay_fit(ts, values) -> DecayFit:
    """Least-squares exponents of a decreasing series in both regimes."""
    ts = np.asarray(ts, dtype=float)
    vals = np.asarray(values, dtype=float)
    keep = vals > 0
    if (~keep).any():
        log.info("dropping %d non-positive points from the fit", int((~keep).sum()))
    ts, vals = ts[keep], vals[keep]
    if len(ts) < 4:
        raise ValueError("a fit needs at least 4 positive points")
    lt = np.abs(np.log(ts))
    # t = 1 has |log t| = 0 and only enters the power fit
    on = lt > 0
    if on.sum() >= 2:
        s_log, r_log = _lsq(np.log(lt[on]), np.log(vals[on]))
    else:
        s_log, r_log = math.nan, math.nan
    s_pow, r_pow = _lsq(np.log(ts), np.log(vals))
    return DecayFit(-s_log, r_log, -s_pow, r_pow, len(ts), int((~keep).sum()))


@dataclass
class EstimateReport:
    name: str
    inputs: dict
    series: list[tuple[float, float, float, float]]  # (param, value, lo, hi)
    fitted_exponent: float | None = None
    fit_residual: float | None = None
    verdict: str = "inconclusive"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        params = [s[0] for s in self.series]
        if any(b <= a for a, b in zip(params, params[1:])):
            raise ValueError("series parameters must be strictly increasing")
        if self.fitted_exponent is not None and len(self.series) < 4:
            raise ValueError("a fitted exponent needs at least 4 points")
        if self.verdict not in ("consistent", "inconsistent", "inconclusive"):
            raise ValueError(f"bad verdict {self.verdict!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["param", "value", "lo", "hi"])
        for row in self.series:
            wr.writerow([repr(float(c)) for c in row])
        return buf.getvalue()

    def filename(self, grid_label: str, date: str) -> str:
        return f"{self.name}.{grid_label}.{date}.csv"


def decay_report(u: ConvexGridFunction, region=None, name: str = "decay",
                 min_nodes: int = 50) -> EstimateReport:
    lap = laplacian_field(u)
    region = ball_region(u.grid) if region is None else region
    ts = dyadic_levels(lap, region, min_nodes)
    vals = [level_integral(lap, t, u.grid, region) for t in ts]
    series = [(float(t), float(v), float(v), float(v)) for t, v in zip(ts, vals)]
    if len(series) >= 4:
        fit = decay_fit(ts, vals)
        return EstimateReport(name, {"min_nodes": min_nodes}, series, fit.log_exponent,
                              fit.log_residual, "inconclusive",
                              {"power_exponent": fit.power_exponent,
                               "power_residual": fit.power_residual})
    return EstimateReport(name, {"min_nodes": min_nodes}, series)


# ---------------------------------------------------------------------------
# covering sums


def covering_sum(radii, a: float = 1.0, eta: float = 0.0) -> float:
    """sum r^a |log r|^eta over a cover by balls of the given radii."""
    r = np.asarray(radii, dtype=float).ravel()
    if np.any(r <= 0) or np.any(r >= 1):
        raise ValueError("radii must lie in (0, 1)")
    return math.fsum((r**a * np.abs(np.log(r)) ** eta).tolist())


# ---------------------------------------------------------------------------
# the divergence mechanism near a singular line


def orlicz_phi(x, M: float):
    x = np.asarray(x, dtype=float)
    return (1 + x) * np.log1p(x) ** M


@dataclass(frozen=True)
class JensenCheck:
    lhs: float
    rhs: float
    c: float

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs * (1 - 1e-12) - 1e-300


def jensen_check(f, weights, r: float, n: int, M: float) -> JensenCheck:
    """lhs = int_{B_r} phi(r^n f), rhs = c r^n phi(r^n avg f) with c r^n = |B_r|.

    Jensen's inequality for the probability measure weights/|B_r| gives
    lhs >= rhs whenever phi is convex on [0, inf), i.e. M >= 1.
    """
    if M < 1:
        raise ValueError("phi is convex on [0, inf) only for M >= 1")
    f = np.asarray(f, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(f < 0):
        raise ValueError("f must be non-negative")
    vol = float(w.sum())
    lhs = math.fsum((w * orlicz_phi(r**n * f, M)).tolist())
    avg = math.fsum((w * f).tolist()) / vol
    rhs = vol * float(orlicz_phi(r**n * avg, M))
    return JensenCheck(lhs, rhs, vol / r**n)


def ball_mask(grid: GridSpec, x, r: float) -> np.ndarray:
    d = np.linalg.norm(grid.coords - np.asarray(x, dtype=float), axis=-1)
    return grid.mask & (d <= r * (1 + 1e-12))


def boundary_growth(func, x, r: float, directions: np.ndarray, slope=None) -> float:
    """sup over the sphere |y - x| = r of (func(y) - func(x) - slope.(y - x)) / (r / |log r|)."""
    x = np.asarray(x, dtype=float)
    Y = x + r * directions
    base = float(func(x[None])[0])
    s = np.zeros_like(x) if slope is None else np.asarray(slope, dtype=float)
    vals = func(Y) - base - (Y - x) @ s
    return float(np.max(vals)) / (r / abs(math.log(r)))


@dataclass(frozen=True)
class SingularBallPoint:
    r: float
    ratio: float
    ratio_excluded: float
    growth: float


def singular_ball_lower_bound(u: ConvexGridFunction, x, radii, M: float, *,
                              line_axis: int = 2, delta_field=None) -> list[SingularBallPoint]:
    """int_{B_r(x)} phi(Delta u) / (r^(n-1) |log r|^(M-1)) over the radii.

    Also reports the same ratio with a one-cell collar around the line
    through x along ``line_axis`` removed, and the measured boundary growth
    sup_{|y - x| = r}(u - tangent) / (r / |log r|) on grid nodes within half
    a spacing of the sphere.
    """
    g = u.grid
    node = tuple(int(i) for i in x)
    xp = g.point(node)
    lap = laplacian_field(u) if delta_field is None else delta_field
    slope = central_subgradients(u)[node]
    others = [a for a in range(g.dim) if a != line_axis]
    dist_line = np.linalg.norm(g.coords[..., others] - xp[others], axis=-1)
    near_line = dist_line <= g.h * (1 + 1e-9)
    depth = g.signed_depth(xp)
    out = []
    for r in sorted(radii):
        if r < 3 * g.h:
            raise ValueError(f"radius {r} is below 3 spacings")
        if r > depth:
            raise ValueError(f"ball of radius {r} leaves the domain")
        m = ball_mask(g, xp, r) & np.isfinite(lap)
        w = m * g.cell_volume
        f = np.maximum(np.nan_to_num(lap, nan=0.0), 0.0)
        dens = orlicz_phi(f, M) * w
        denom = r ** (g.dim - 1) * abs(math.log(r)) ** (M - 1)
        total = math.fsum(dens.ravel().tolist())
        excl = math.fsum((dens * ~near_line).ravel().tolist())
        d = np.linalg.norm(g.coords - xp, axis=-1)
        shell = g.mask & (np.abs(d - r) <= 0.5 * g.h)
        rise = u.values[shell] - u.values[node] - (g.coords[shell] - xp) @ slope
        growth = float(np.max(rise)) / (r / abs(math.log(r)))
        out.append(SingularBallPoint(float(r), total / denom, excl / denom, growth))
    return out


# ---------------------------------------------------------------------------
# mass of small balls


@dataclass
class ProbeResult:
    hbar: float
    radii: list[float]
    mass: list[float]
    benchmarks: dict[float, list[float]]

    @property
    def empty(self) -> bool:
        return not self.radii


def prop_probe(u: ConvexGridFunction, x, h: float, hbar: float, *, etas=(0.1, 0.5, 1.0),
               slope_resolution: int = 256, c: float = 1.0) -> ProbeResult:
    """Monge-Ampere mass of B_r(x) for v = u + |x|^2/2 against r^(n-1) |log r|^eta.

    Radii are dyadic between 2 spacings and exp(-c |log h|^(1/2)), capped by
    the distance to the boundary.  Nothing is scanned unless h > h-bar.
    """
    g = u.grid
    node = tuple(int(i) for i in x)
    if not h > hbar:
        return ProbeResult(hbar, [], [], {e: [] for e in etas})
    xp = g.point(node)
    r_max = min(math.exp(-c * math.sqrt(abs(math.log(h)))), float(g.signed_depth(xp)))
    radii = []
    r = 2.0 ** math.floor(math.log2(r_max)) if r_max > 0 else 0.0
    while r >= 2 * g.h:
        radii.append(r)
        r /= 2
    radii.sort()
    if not radii:
        return ProbeResult(hbar, [], [], {e: [] for e in etas})
    field_ = ma_measure(add_half_square(u), slope_resolution)
    mass = [field_.mass_in(ball_mask(g, xp, r)) for r in radii]
    bench = {e: [r ** (g.dim - 1) * abs(math.log(r)) ** e for r in radii] for e in etas}
    return ProbeResult(hbar, radii, mass, bench)
