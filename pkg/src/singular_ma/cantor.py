"""Fat Cantor set S and the spike function v built on its removed intervals.

Construction: start from [-1/2, 1/2]; at step k remove, from the center of
every surviving interval, an open interval whose length is the fraction
5/(k+5) of that interval.  After step k there are 2**k survivors of common
length ``L_k`` and the removed intervals of step k have length ``l_k``.

The spike function is

    v(x) = sum_k sum_i k**4 l_k**2 f((x - x_{i,k}) / l_k),
    f(z) = |z|          for |z| <= 1,
    f(z) = 2|z| - 1     for |z| > 1,

truncated at a finite depth.  Every level of the sum has 2**(k-1) terms, so
evaluation never enumerates centers: the sum of |x - c| over the centers of a
subtree lying entirely on one side of ``x`` equals count * |x - midpoint| by
symmetry of the construction, and only O(1) centers per level are close
enough to ``x`` to sit on the inner branch of ``f``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

# explicit center/interval arrays are only materialised up to this depth
MAX_EXPLICIT_DEPTH = 22
KINK_TOL = 1e-9


def removal_fraction(k: int) -> Fraction:
    return Fraction(5, k + 5)


def exact_lengths(K: int) -> tuple[list[Fraction], list[Fraction]]:
    """Exact removed lengths ``l[1..K]`` and survivor lengths ``L[0..K]``.

    ``l[0]`` is ``None`` so that indices match the step number.
    """
    L = [Fraction(1)]
    l: list[Fraction | None] = [None]
    for k in range(1, K + 1):
        frac = removal_fraction(k)
        l.append(frac * L[-1])
        L.append(L[-1] * (1 - frac) / 2)
    return l, L


def closed_form_removed_length(k: int) -> Fraction:
    """l_k = 10/(k+5) 2^-k (1 - 5/(k+4)) ... (1 - 5/6)."""
    prod = Fraction(1)
    for j in range(1, k):
        prod *= 1 - Fraction(5, j + 5)
    return Fraction(10, k + 5) * Fraction(1, 2**k) * prod


@dataclass(frozen=True)
class CantorStructure:
    """Levels 1..K of the construction.

    ``removed_lengths[k]`` and ``survivor_lengths[k]`` are floats indexed by the
    step number (index 0 of ``removed_lengths`` is NaN).  Centers and survivor
    intervals are produced lazily and only for ``k <= MAX_EXPLICIT_DEPTH``.
    """

    depth: int
    removed_lengths: np.ndarray
    survivor_lengths: np.ndarray
    exact_removed: tuple[Fraction | None, ...] = field(repr=False)
    exact_survivor: tuple[Fraction, ...] = field(repr=False)

    def removed_count(self, k: int) -> int:
        return 2 ** (k - 1)

    def survivors(self, k: int) -> np.ndarray:
        """(2**k, 2) array of survivor intervals after step k, sorted."""
        _check_explicit(k)
        left = np.array([-0.5])
        for j in range(1, k + 1):
            shift = self.survivor_lengths[j - 1] - self.survivor_lengths[j]
            left = np.stack([left, left + shift], axis=1).ravel()
        return np.stack([left, left + self.survivor_lengths[k]], axis=1)

    def centers(self, k: int) -> np.ndarray:
        """Sorted centers x_{i,k} of the 2**(k-1) intervals removed at step k."""
        if not 1 <= k <= self.depth:
            raise ValueError(f"level {k} outside 1..{self.depth}")
        prev = self.survivors(k - 1)
        return prev.mean(axis=1)

    def removed_intervals(self, k: int) -> np.ndarray:
        c = self.centers(k)
        half = 0.5 * self.removed_lengths[k]
        return np.stack([c - half, c + half], axis=1)

    def survivor_endpoints(self, k: int) -> np.ndarray:
        return np.unique(self.survivors(k).ravel())

    @cached_property
    def total_removed(self) -> Fraction:
        return sum(
            (self.exact_removed[k] * 2 ** (k - 1) for k in range(1, self.depth + 1)),
            Fraction(0),
        )

    def to_json(self, explicit_depth: int = 8) -> str:
        kmax = min(self.depth, explicit_depth)
        levels = []
        for k in range(1, self.depth + 1):
            rec = {
                "k": k,
                "removed_length": float(self.removed_lengths[k]),
                "removed_count": self.removed_count(k),
                "survivor_length": float(self.survivor_lengths[k]),
            }
            if k <= kmax:
                rec["centers"] = self.centers(k).tolist()
                rec["survivors"] = self.survivors(k).tolist()
            levels.append(rec)
        return json.dumps({"depth": self.depth, "levels": levels}, indent=2)


def _check_explicit(k: int) -> None:
    if k > MAX_EXPLICIT_DEPTH:
        raise ValueError(
            f"explicit enumeration limited to depth {MAX_EXPLICIT_DEPTH}, got {k}"
        )


def build_cantor(K: int) -> CantorStructure:
    if not 1 <= K <= 60:
        raise ValueError("depth must satisfy 1 <= K <= 60")
    l, L = exact_lengths(K)
    lf = np.array([np.nan] + [float(x) for x in l[1:]])
    Lf = np.array([float(x) for x in L])
    return CantorStructure(K, lf, Lf, tuple(l), tuple(L))


def f_eval(x, kink: float = 1.0):
    """The profile: |x| for |x| <= kink, 2|x| - kink beyond."""
    a = np.abs(np.asarray(x, dtype=float))
    out = np.where(a <= kink, a, 2.0 * a - kink)
    return out if out.ndim else float(out)


class SpikeFunction:
    """Truncated spike function v built on a :class:`CantorStructure`.

    ``kink`` places the outer kinks of every summand at distance ``kink * l_k``
    from its center.  The default 1.0 is the construction as written; 0.5
    puts them on the endpoints of the removed intervals.
    """

    def __init__(self, cantor: CantorStructure, depth: int | None = None,
                 kink: float = 1.0):
        self.cantor = cantor
        self.depth = cantor.depth if depth is None else depth
        if not 1 <= self.depth <= cantor.depth:
            raise ValueError("truncation depth exceeds the Cantor depth")
        if not 0.0 < kink <= 1.0:
            raise ValueError("kink must lie in (0, 1]")
        self.kink = kink
        k = np.arange(1, self.depth + 1, dtype=float)
        self._l = cantor.removed_lengths[1 : self.depth + 1]
        self._L = cantor.survivor_lengths[: self.depth + 1]
        self._amp = k**4 * self._l**2

    # -- core: per-level aggregated quantities -------------------------------

    def _levels(self, x: np.ndarray, side: int = 0):
        """Per-point, per-level data needed for values and slopes.

        Returns ``absum`` (sum_i |x - c_ik|), ``sgn`` (sum_i sign(x - c_ik))
        and ``near`` (list of candidate center arrays per level, NaN if none).
        ``side`` only affects tie-breaking (for one-sided derivatives).
        """
        K = self.depth
        n = x.size
        L = self._L
        absum = np.zeros((n, K))
        sgn = np.zeros((n, K))
        # up to two candidate centers per level for the inner branch of f
        near = np.full((n, K, 2), np.nan)

        lo = np.full(n, -0.5)
        hi = np.full(n, 0.5)
        active = np.ones(n, dtype=bool)  # x still inside the current survivor
        counts = 2.0 ** np.arange(K)

        def lt(a, b):
            return a < b if side >= 0 else a <= b

        # x outside [-1/2, 1/2]: whole tree on one side
        outside_left = lt(x, lo)
        outside_right = x > hi if side <= 0 else x >= hi
        for mask, edge_sign in ((outside_left, -1.0), (outside_right, 1.0)):
            if not mask.any():
                continue
            active[mask] = False
            xm = x[mask]
            # all 2^(k-1) centers at level k have mean 0
            absum[mask] += np.abs(xm)[:, None] * counts[None, :]
            sgn[mask] += edge_sign * counts[None, :]
            self._edge_candidates(near, mask, np.full(xm.shape, lo[0]),
                                  np.full(xm.shape, hi[0]), 0, edge_sign)

        for m in range(K):  # current survivor is at depth m
            if not active.any():
                break
            idx = np.flatnonzero(active)
            xa = x[idx]
            a, b = lo[idx], hi[idx]
            mid = 0.5 * (a + b)
            # the level m+1 center is the midpoint of the current survivor
            absum[idx, m] += np.abs(xa - mid)
            sgn[idx, m] += np.where(lt(xa, mid), -1.0, 1.0)
            near[idx, m, 0] = mid
            child = L[m + 1]
            left_end = a + child
            right_start = b - child
            in_left = lt(xa, left_end)
            in_right = ~lt(xa, right_start)
            in_gap = ~in_left & ~in_right
            # descendants of the sibling subtree(s) at levels k >= m+2
            if m + 1 < K:
                ks = np.arange(m + 1, K)  # zero-based level index k-1
                cnt = 2.0 ** (ks - (m + 1))
                mid_l = a + 0.5 * child
                mid_r = b - 0.5 * child
                # sibling on the right of x when x is in the left child or gap
                right_sib = in_left | in_gap
                left_sib = in_right | in_gap
                absum[idx[right_sib][:, None], ks] += (
                    (mid_r - xa)[right_sib][:, None] * cnt
                )
                sgn[idx[right_sib][:, None], ks] -= cnt
                absum[idx[left_sib][:, None], ks] += (
                    (xa - mid_l)[left_sib][:, None] * cnt
                )
                sgn[idx[left_sib][:, None], ks] += cnt
                if in_gap.any():
                    self._gap_candidates(near, idx[in_gap], a[in_gap], left_end[in_gap],
                                         right_start[in_gap], b[in_gap], m + 1)
            active[idx[in_gap]] = False
            nl = idx[in_left]
            hi[nl] = left_end[in_left]
            nr = idx[in_right]
            lo[nr] = right_start[in_right]
        return absum, sgn, near

    def _edge_candidates(self, near, mask, a, b, m, edge_sign):
        """x beyond the survivor [a, b] (depth m): nearest descendant centers."""
        rows = np.flatnonzero(mask)
        for k0 in range(m, self.depth):  # level k0+1, centers = mids of depth k0 survivors
            half = 0.5 * self._L[k0]
            c = b - half if edge_sign > 0 else a + half
            near[rows, k0, 1] = c

    def _gap_candidates(self, near, rows, a, left_end, right_start, b, m1):
        for k0 in range(m1, self.depth):
            half = 0.5 * self._L[k0]
            near[rows, k0, 0] = left_end - half
            near[rows, k0, 1] = right_start + half

    # -- public evaluation ---------------------------------------------------

    def value(self, x):
        """Truncated series value at ``x`` (scalar or array)."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        flat = xa.ravel()
        absum, _, near = self._levels(flat)
        l, rho = self._l, self.kink
        cnt = 2.0 ** np.arange(self.depth)
        # profile(z) = 2|z| - rho + max(0, rho - |z|)
        base = self._amp * (2.0 * absum / l - rho * cnt)
        z = np.abs(flat[:, None, None] - near) / l[None, :, None]
        corr = np.maximum(0.0, rho - np.nan_to_num(z, nan=np.inf)).sum(axis=2)
        total = (base + self._amp * corr).sum(axis=1)
        return total.reshape(xa.shape) if np.ndim(x) else float(total[0])

    def slope(self, x, side: int = 1):
        """One-sided derivative v'(x+) (side=1) or v'(x-) (side=-1)."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        flat = xa.ravel()
        _, sgn, near = self._levels(flat, side=side)
        l, rho = self._l, self.kink
        amp1 = self._amp / l  # k^4 l_k
        z = np.nan_to_num((flat[:, None, None] - near) / l[None, :, None], nan=np.inf)
        # survivor endpoints can sit exactly on an outer kink
        z = np.where(np.abs(np.abs(z) - rho) < KINK_TOL, rho * np.sign(z), z)
        if side > 0:
            inner = (z >= -rho) & (z < rho)
            sg = np.where(z >= 0, 1.0, -1.0)
        else:
            inner = (z > -rho) & (z <= rho)
            sg = np.where(z > 0, 1.0, -1.0)
        corr = np.where(inner, -sg, 0.0).sum(axis=2)
        total = (amp1 * (2.0 * sgn + corr)).sum(axis=1)
        return total.reshape(xa.shape) if np.ndim(x) else float(total[0])

    def subgradient(self, x) -> tuple[float, float]:
        return self.slope(x, side=-1), self.slope(x, side=1)

    def tail_bound(self, far: float = 1.5) -> float:
        """Upper bound on v_infinity - v_depth on [-1, 1].

        Each omitted summand is at most 2 k^4 l_k |x - c| <= 2 far k^4 l_k and
        the level count is 2^(k-1); 2^(k-1) k^4 l_k <= 600/k^2 closes the sum.
        """
        K = self.depth
        k = K + 1
        lead = 0.0
        for j in range(k, k + 2000):  # exact part
            lead += 600.0 * j**3 / ((j + 1) * (j + 2) * (j + 3) * (j + 4) * (j + 5))
        rest = 600.0 / (k + 2000 - 1)
        return 2.0 * far * (lead + rest)

    def sup_bound(self) -> float:
        """Finite bound on sup |v| over [-1, 1] from the truncated levels + tail."""
        k = np.arange(1, self.depth + 1, dtype=float)
        lvl = 2.0 ** (k - 1) * k**4 * self._l * 3.0
        return float(lvl.sum()) + self.tail_bound()


def brute_force_v(cantor: CantorStructure, x, depth: int, kink: float = 1.0) -> np.ndarray:
    """Direct summation over all centers (small depth only)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    total = np.zeros_like(x)
    for k in range(1, depth + 1):
        lk = cantor.removed_lengths[k]
        c = cantor.centers(k)
        total += k**4 * lk**2 * f_eval((x[:, None] - c[None, :]) / lk, kink).sum(axis=1)
    return total


def separation_ratio(v: SpikeFunction, x, r) -> np.ndarray:
    """(v(x+r) - v(x) - v'(x-) r) / (r^2 |log r|^4)."""
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    s = v.slope(x, side=-1)
    num = v.value(x + r) - v.value(x) - s * r
    return num / (r**2 * np.abs(np.log(r)) ** 4)


def v_separation_check(v: SpikeFunction, x: float, r: float) -> float:
    cant = v.cantor
    lo = cant.removed_lengths[v.depth]
    hi = cant.removed_lengths[1]
    if not lo < r <= hi:
        raise ValueError(f"r={r} outside (l_K, l_1] = ({lo}, {hi}]")
    return float(separation_ratio(v, x, r))


def covering_sum(cantor: CantorStructure, k: int, eta: float) -> float:
    """sum r |log r|**eta over the natural cover of S by the 2**k survivors.

    Each survivor is taken with r equal to its length ``L_k``.
    """
    r = cantor.survivor_lengths[k]
    return float(2.0**k * r * abs(np.log(r)) ** eta)


def survivor_length_floor(k: int) -> Fraction:
    """The lower bound 2^-k k^-15 claimed for the survivor lengths."""
    return Fraction(1, 2**k * k**15)


def survivor_mass_closed_form(k: int) -> Fraction:
    """2^k L_k = 120 / ((k+1)(k+2)(k+3)(k+4)(k+5))."""
    return Fraction(120, (k + 1) * (k + 2) * (k + 3) * (k + 4) * (k + 5))
