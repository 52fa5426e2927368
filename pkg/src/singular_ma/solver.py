"""Monotone wide-stencil finite differences and damped Newton for det D^2 u = f.

The discrete operator at an interior node x is

    MA[u](x) = min over orthogonal frames (d_1..d_n) of prod_k max(D_{d_k} u(x), 0),
    D_d u(x) = (u(x + d) + u(x - d) - 2 u(x)) / |d|^2,

where the frames are built from primitive lattice directions of max-norm at
most ``stencil_radius`` and a frame is used at x only if all its stencil
points are domain nodes.  The minimum over frames is the discrete analogue
of det A = min over orthonormal frames of prod_k e_k . A e_k (Hadamard).

Newton runs on the equivalent concave form.  For nonnegative second
differences, AM-GM gives

    (prod_k D_k)^(1/n) = min over w > 0 with prod_k w_k >= 1 of (1/n) sum_k w_k D_k,

so MA[u] = f is rewritten as

    G[u](x) = min over frames, min over weights of (1/n) sum_k w_k D_k u(x) = f(x)^(1/n),

a min of linear monotone operators.  The weights are confined to
[1/W, W], which keeps every linearisation a nonsingular M-matrix and
changes nothing unless two second differences in a frame differ by more
than W^2.  The Newton step for G is a policy-iteration step, so a full step
is always safe; damping is tried first and the full step is the fallback.
The reported residual always uses MA itself.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .convex_core import is_discretely_convex, lower_convex_envelope, shifted
from .grid import ConvexGridFunction, GridSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# stencil geometry


def primitive_directions(dim: int, radius: int) -> list[tuple[int, ...]]:
    """Primitive integer vectors with entries in [-radius, radius], one per +-pair."""
    out = []
    for v in itertools.product(range(-radius, radius + 1), repeat=dim):
        if not any(v):
            continue
        first = next(c for c in v if c)
        if first < 0 or math.gcd(*map(abs, v)) != 1:
            continue
        out.append(v)
    return out


def direction_frames(grid: GridSpec, radius: int) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Directions and the orthogonal frames (as index tuples) they form.

    Orthogonality is tested on physical vectors, so grids with unequal
    spacing keep only the frames that remain orthogonal.
    """
    dirs = primitive_directions(grid.dim, radius)
    phys = np.array(dirs, dtype=float) * np.asarray(grid.spacing)
    gram = phys @ phys.T
    scale = np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    ortho = np.abs(gram) <= 1e-12 * scale
    frames = []
    for combo in itertools.combinations(range(len(dirs)), grid.dim):
        if all(ortho[a, b] for a, b in itertools.combinations(combo, 2)):
            frames.append(combo)
    axis = tuple(sorted(dirs.index(tuple(int(i == k) for i in range(grid.dim))) for k in range(grid.dim)))
    frames.remove(axis)
    frames.insert(0, axis)
    return dirs, frames


@dataclass
class Stencil:
    grid: GridSpec
    radius: int
    dirs: list[tuple[int, ...]]
    frames: list[tuple[int, ...]]
    lengths2: np.ndarray  # |d|^2 in physical units, per direction
    valid: np.ndarray  # (ndirs,) + counts: x +- d both domain nodes
    frame_ok: np.ndarray  # (nframes,) + counts

    @classmethod
    def build(cls, grid: GridSpec, radius: int = 2) -> "Stencil":
        dirs, frames = direction_frames(grid, radius)
        phys = np.array(dirs, dtype=float) * np.asarray(grid.spacing)
        lengths2 = np.sum(phys**2, axis=1)
        m = grid.mask.astype(float)
        m[~grid.mask] = np.nan
        valid = np.empty((len(dirs),) + grid.counts, dtype=bool)
        for i, d in enumerate(dirs):
            nd = tuple(-c for c in d)
            valid[i] = grid.mask & np.isfinite(shifted(m, d)) & np.isfinite(shifted(m, nd))
        frame_ok = np.stack([np.all(valid[list(f)], axis=0) for f in frames])
        return cls(grid, radius, dirs, frames, lengths2, valid, frame_ok)

    def second_differences(self, values: np.ndarray) -> np.ndarray:
        out = np.empty((len(self.dirs),) + self.grid.counts)
        for i, d in enumerate(self.dirs):
            nd = tuple(-c for c in d)
            out[i] = (shifted(values, d) + shifted(values, nd) - 2.0 * values) / self.lengths2[i]
        return out


def discrete_ma_operator(u: ConvexGridFunction, stencil_radius: int = 2, *,
                         stencil: Stencil | None = None) -> np.ndarray:
    """min over usable frames of prod max(D_d u, 0); NaN off the interior."""
    st = stencil or Stencil.build(u.grid, stencil_radius)
    D = np.maximum(st.second_differences(u.values), 0.0)
    best = np.full(u.grid.counts, np.inf)
    for fi, fr in enumerate(st.frames):
        prod = np.prod(D[list(fr)], axis=0)
        best = np.where(st.frame_ok[fi], np.minimum(best, prod), best)
    best[~u.grid.interior] = np.nan
    return best


# ---------------------------------------------------------------------------
# problem and report


@dataclass
class DirichletProblem:
    grid: GridSpec
    rhs: np.ndarray
    boundary: np.ndarray
    stencil_radius: int = 2

    def __post_init__(self):
        g = self.grid
        rhs = np.broadcast_to(np.asarray(self.rhs, dtype=float), g.counts).copy()
        if np.any(rhs[g.interior] <= 0):
            raise ValueError("right-hand side must be positive on interior nodes")
        bnd = np.broadcast_to(np.asarray(self.boundary, dtype=float), g.counts).copy()
        if not np.all(np.isfinite(bnd[g.boundary])):
            raise ValueError("boundary data must be finite on boundary nodes")
        self.rhs = rhs
        self.boundary = bnd

    @classmethod
    def from_functions(cls, grid: GridSpec, f=1.0, phi=None, stencil_radius: int = 2):
        pts = grid.coords
        rhs = np.ones(grid.counts)
        if callable(f):
            rhs[grid.mask] = f(pts[grid.mask])
        else:
            rhs *= float(f)
        bnd = np.full(grid.counts, np.nan)
        bnd[grid.boundary] = phi(pts[grid.boundary])
        return cls(grid, rhs, bnd, stencil_radius)

    @property
    def lam(self) -> float:
        return float(np.min(self.rhs[self.grid.interior]))


@dataclass
class SolverReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    damping_history: list[float] = field(default_factory=list)
    converged: bool = False
    residual: float = math.inf
    convexified: bool = False
    seconds: float = 0.0
    linear_solver: str = ""
    roundoff_floor: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# ---------------------------------------------------------------------------
# Newton machinery


def _frame_weights(Df: np.ndarray, bound: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimising weights and value of (1/n) sum w_k D_k for one frame.

    ``Df`` has shape (n, m).  Weights lie in [1/bound, bound] with
    prod w >= 1.  Columns with positive, moderately spread entries take the
    AM-GM weights gm/D_k in closed form; the rest are settled by bisection
    on the common level mu in w_k = clip(mu / D_k).
    """
    n = Df.shape[0]
    pos = Df > 0
    safe = np.where(pos, Df, 1.0)
    gm = np.exp(np.mean(np.log(safe), axis=0))
    w = gm / safe
    hard = ~np.all(pos, axis=0) | np.any((w > bound) | (w < 1.0 / bound), axis=0)
    if np.any(hard):
        D = Df[:, hard]
        P = pos[:, hard]
        logb = math.log(bound)
        logD = np.log(np.where(P, D, 1.0))
        lo = np.min(np.where(P, logD, np.inf), axis=0) - logb - 1.0
        hi = np.max(np.where(P, logD, -np.inf), axis=0) + logb + 1.0
        lo = np.where(np.isfinite(lo), lo, 0.0)
        hi = np.where(np.isfinite(hi), hi, 0.0)

        def logw(lm):
            return np.where(P, np.clip(lm - logD, -logb, logb), logb)

        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ok = logw(mid).sum(axis=0) >= 0.0
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
        w[:, hard] = np.exp(logw(hi))
    return w, np.sum(w * Df, axis=0) / n


class _System:
    """Index bookkeeping between the node grid and the unknown vector."""

    def __init__(self, problem: DirichletProblem, stencil: Stencil):
        g = problem.grid
        self.g = g
        self.st = stencil
        self.unknown = g.interior
        self.n = int(self.unknown.sum())
        self.number = np.full(g.counts, -1, dtype=np.int64)
        self.number[self.unknown] = np.arange(self.n)
        self.f = problem.rhs[self.unknown]
        self.root_f = self.f ** (1.0 / g.dim)
        # shifted unknown numbers per direction, -1 where not an unknown
        self.nbr = []
        num = self.number.astype(float)
        num[self.number < 0] = np.nan
        for d in stencil.dirs:
            nd = tuple(-c for c in d)
            plus = shifted(num, d)[self.unknown]
            minus = shifted(num, nd)[self.unknown]
            self.nbr.append((np.nan_to_num(plus, nan=-1).astype(np.int64),
                             np.nan_to_num(minus, nan=-1).astype(np.int64)))
        self.frame_ok = stencil.frame_ok[:, self.unknown]

    def full(self, x: np.ndarray, base: np.ndarray) -> np.ndarray:
        vals = base.copy()
        vals[self.unknown] = x
        return vals

    def evaluate(self, vals: np.ndarray, bound: float, jacobian: bool):
        st = self.st
        D = st.second_differences(vals)[:, self.unknown]
        nf = len(st.frames)
        G = np.full((nf, self.n), np.inf)
        weights = []
        for fi, fr in enumerate(st.frames):
            cols = np.flatnonzero(self.frame_ok[fi])
            w, val = _frame_weights(D[list(fr)][:, cols], bound)
            G[fi, cols] = val
            weights.append((cols, w))
        choice = np.argmin(G, axis=0)
        F = G[choice, np.arange(self.n)] - self.root_f
        if not jacobian:
            return F, None
        rows, cols_, data = [], [], []
        dim = self.g.dim
        for fi, fr in enumerate(st.frames):
            cols, w = weights[fi]
            keep = choice[cols] == fi
            if not np.any(keep):
                continue
            sel = cols[keep]
            for k, di in enumerate(fr):
                c = w[k, keep] / (dim * st.lengths2[di])
                rows.append(sel)
                cols_.append(sel)
                data.append(-2.0 * c)
                for nb in self.nbr[di]:
                    j = nb[sel]
                    ok = j >= 0
                    rows.append(sel[ok])
                    cols_.append(j[ok])
                    data.append(c[ok])
        J = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols_))),
                          shape=(self.n, self.n))
        return F, J

    def true_residual(self, vals: np.ndarray) -> float:
        return self.residual_and_floor(vals)[0]

    def residual_and_floor(self, vals: np.ndarray) -> tuple[float, float]:
        """Max |MA - f| and the part of it rounding alone can produce.

        A relative error eps in the stencil values moves D_k by about
        4 eps |u| / |d_k|^2, and MA by that times the other factors of the
        active frame.
        """
        if not self.n:
            return 0.0, 0.0
        st = self.st
        D = np.maximum(st.second_differences(vals)[:, self.unknown], 0.0)
        best = np.full(self.n, np.inf)
        floor = np.zeros(self.n)
        noise = 4.0 * np.finfo(float).eps * float(np.nanmax(np.abs(vals)))
        for fi, fr in enumerate(st.frames):
            Df = D[list(fr)]
            prod = np.prod(Df, axis=0)
            sens = sum(np.prod(np.delete(Df, k, axis=0), axis=0) / st.lengths2[di]
                       for k, di in enumerate(fr))
            take = self.frame_ok[fi] & (prod < best)
            best = np.where(take, prod, best)
            floor = np.where(take, noise * sens, floor)
        return float(np.max(np.abs(best - self.f))), float(np.max(floor))


def _linear_solve(J: sp.csr_matrix, rhs: np.ndarray, method: str) -> np.ndarray:
    if method == "direct":
        return spla.spsolve(J.tocsc(), rhs)
    # rows differ by many orders of magnitude where the solution degenerates
    d = np.abs(J.diagonal())
    d[d == 0] = 1.0
    J = (sp.diags(1.0 / d) @ J).tocsr()
    rhs = rhs / d
    # -J is an M-matrix, the setting algebraic multigrid is built for
    target = 1e-10 * max(float(np.linalg.norm(rhs)), 1e-300)
    for build in (pyamg.ruge_stuben_solver, pyamg.smoothed_aggregation_solver):
        try:
            with np.errstate(all="ignore"):
                ml = build(-J, max_coarse=500)
                x = ml.solve(-rhs, tol=1e-12, accel="gmres", maxiter=300)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            log.info("%s failed: %s", build.__name__, e)
            continue
        if np.all(np.isfinite(x)) and np.linalg.norm(J @ x - rhs) <= target:
            return x
        log.info("%s did not reach tolerance", build.__name__)
    try:
        ilu = spla.spilu(J.tocsc(), drop_tol=1e-4, fill_factor=5)
    except RuntimeError:
        log.info("incomplete factorisation failed; using direct solve")
        return spla.spsolve(J.tocsc(), rhs)
    M = spla.LinearOperator(J.shape, ilu.solve)
    x, info = spla.gmres(J, rhs, M=M, rtol=1e-12, atol=0.0, restart=60, maxiter=50)
    if info != 0:
        log.info("gmres did not reach tolerance (info=%d); using direct solve", info)
        return spla.spsolve(J.tocsc(), rhs)
    return x


def poisson_guess(problem: DirichletProblem) -> np.ndarray:
    """Solution of the 2n+1 point Laplace equation lap u = n f^(1/n)."""
    g = problem.grid
    st = Stencil.build(g, 1)
    sysm = _System(problem, st)
    base = np.where(g.boundary, problem.boundary, 0.0)
    base[~g.mask] = np.nan
    rows, cols, data = [], [], []
    rhs = g.dim * problem.rhs[sysm.unknown] ** (1.0 / g.dim)
    idx = np.arange(sysm.n)
    for ax in range(g.dim):
        di = st.dirs.index(tuple(int(i == ax) for i in range(g.dim)))
        h2 = st.lengths2[di]
        rows.append(idx)
        cols.append(idx)
        data.append(np.full(sysm.n, -2.0 / h2))
        for nb, sign in zip(sysm.nbr[di], (1, -1)):
            ok = nb >= 0
            rows.append(idx[ok])
            cols.append(nb[ok])
            data.append(np.full(ok.sum(), 1.0 / h2))
            e = tuple(sign * int(i == ax) for i in range(g.dim))
            fixed = shifted(base, e)[sysm.unknown]
            rhs = rhs - np.where(ok, 0.0, fixed) / h2
    A = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(sysm.n, sysm.n))
    x = spla.spsolve(A.tocsc(), rhs)
    return sysm.full(x, base)


def solve_dirichlet(problem: DirichletProblem, tol_residual: float | None = None,
                    max_iter: int = 200, *, initial: np.ndarray | None = None,
                    linear_solver: str = "auto", convexify: bool = True,
                    weight_bound: float = 1e8,
                    min_damping: float = 1.0 / 64) -> tuple[ConvexGridFunction, SolverReport]:
    """Damped Newton on the concave min-over-weights form of the scheme.

    Damping halves until the l2 norm of the concave residual decreases; if
    it falls below ``min_damping`` the undamped step is taken.  When
    ``tol_residual`` lies below what rounding permits (see
    ``SolverReport.roundoff_floor``), the floor is used instead.
    """
    t0 = time.perf_counter()
    g = problem.grid
    if tol_residual is None:
        tol_residual = 1e-8 if g.dim <= 2 else 1e-6
    st = Stencil.build(g, problem.stencil_radius)
    sysm = _System(problem, st)
    method = linear_solver
    if method == "auto":
        method = "direct" if g.dim < 3 or sysm.n <= 4000 else "iterative"
    report = SolverReport(linear_solver=method)

    vals = poisson_guess(problem) if initial is None else np.array(initial, dtype=float)
    vals[g.boundary] = problem.boundary[g.boundary]
    vals[~g.mask] = np.nan
    if convexify and not is_discretely_convex(ConvexGridFunction(g, vals)):
        log.info("initial guess is not discretely convex; replacing by its envelope")
        env = lower_convex_envelope(vals, g).values
        vals[sysm.unknown] = env[sysm.unknown]
        report.convexified = True

    x = vals[sysm.unknown].copy()
    res, floor = sysm.residual_and_floor(vals)
    report.residual_history.append(res)
    F, J = sysm.evaluate(vals, weight_bound, jacobian=True)
    it = 0
    while it < max_iter and sysm.n and res > max(tol_residual, floor):
        merit = float(np.linalg.norm(F))
        step = _linear_solve(J, -F, method)
        t = 1.0
        while True:
            trial = x + t * step
            tv = sysm.full(trial, vals)
            Ft, _ = sysm.evaluate(tv, weight_bound, jacobian=False)
            if np.linalg.norm(Ft) < merit:
                break
            t *= 0.5
            if t < min_damping:
                t = 1.0
                trial = x + step
                tv = sysm.full(trial, vals)
                break
        it += 1
        if np.max(np.abs(trial - x)) <= 1e-15 * (1.0 + np.max(np.abs(x))):
            break  # stationary: the weight bound is active
        x, vals = trial, tv
        F, J = sysm.evaluate(vals, weight_bound, jacobian=True)
        res, floor = sysm.residual_and_floor(vals)
        report.damping_history.append(t)
        report.residual_history.append(res)
        log.debug("newton %d: residual %.3e damping %.3g", it, res, t)
    report.iterations = it
    report.residual = res
    report.roundoff_floor = floor
    report.converged = res <= max(tol_residual, floor)
    report.seconds = time.perf_counter() - t0
    lam = problem.lam
    u = ConvexGridFunction(g, vals, lambda_=lam, Lambda=float(np.max(problem.rhs[g.interior])),
                           K=float(np.nanmax(np.abs(vals))))
    verdict = is_discretely_convex(u, tol_convex=1e-9 * (u.sup_norm + 1.0) + 10 * tol_residual)
    return u.with_values(u.values, certified=bool(verdict)), report
