"""The degenerate subsolution

    g(x1, x2) = x1^2 |log x1|^alpha + |x2| / |log x2|^beta,
    w(x1, x2, x3) = g (1 + x3^2 / |log g|),

and its rescalings W(y) = A w(s1 y1, s2 y2, t y3).

With phi(g) = g / |log g| the function is w = g + x3^2 phi(g), so

    w_ij = g_ij (1 + x3^2 phi') + x3^2 phi'' g_i g_j     (i, j in {1, 2})
    w_i3 = 2 x3 phi' g_i,    w_33 = 2 phi,

with phi' = 1/L + 1/L^2 and phi'' = (1/L^2 + 2/L^3)/g, L = |log g|.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

AXIS_MARGIN = 1e-6


def _parts(x1, x2, alpha: float, beta: float):
    """g and its first/second partials (g12 = 0) for 0 < |x1|, |x2| < 1."""
    a, b = np.abs(x1), np.abs(x2)
    L1, L2 = -np.log(a), -np.log(b)
    A = a**2 * L1**alpha
    A1 = x1 * L1 ** (alpha - 1) * (2 * L1 - alpha)
    A11 = L1 ** (alpha - 2) * (2 * L1**2 - 3 * alpha * L1 + alpha * (alpha - 1))
    B = b / L2**beta
    B2 = np.sign(x2) * (L2**-beta + beta * L2 ** (-beta - 1))
    B22 = (beta * L2 ** (-beta - 1) + beta * (beta + 1) * L2 ** (-beta - 2)) / b
    return A + B, A1, B2, A11, B22


@dataclass(frozen=True)
class Subsolution:
    """``A * w(s1 y1, s2 y2, t y3)`` with exponents ``alpha``, ``beta``."""

    amplitude: float = 1.0
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha: float = 4.0
    beta: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.alpha != 2 + 2 * self.beta:
            raise ValueError("the construction needs alpha = 2 + 2 beta")

    def _unscaled(self, y):
        y = np.asarray(y, dtype=float)
        return y * np.asarray(self.scale)

    def value(self, y) -> np.ndarray:
        """Values, continuous across the axes (w = 0 where x1 = x2 = 0)."""
        x = self._unscaled(y)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        a, b = np.abs(x1), np.abs(x2)
        with np.errstate(divide="ignore", invalid="ignore"):
            A = np.where(a > 0, a**2 * np.abs(np.log(a)) ** self.alpha, 0.0)
            B = np.where(b > 0, b / np.abs(np.log(b)) ** self.beta, 0.0)
            g = A + B
            phi = np.where(g > 0, g / np.abs(np.log(g)), 0.0)
        if np.any(g >= 1):
            raise ValueError("g must stay below 1; shrink the coordinate scaling")
        return self.amplitude * (g + x3**2 * phi)

    def gradient(self, y) -> np.ndarray:
        x = self._unscaled(y)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        g, g1, g2, _, _ = _parts(x1, x2, self.alpha, self.beta)
        L = -np.log(g)
        phi, dphi = g / L, 1 / L + 1 / L**2
        grad = np.stack([g1 * (1 + x3**2 * dphi), g2 * (1 + x3**2 * dphi), 2 * x3 * phi], axis=-1)
        return self.amplitude * grad * np.asarray(self.scale)

    def degenerate_mask(self, y) -> np.ndarray:
        """True on {y1 = 0} or {y2 = 0}, where w has a degenerate direction."""
        y = np.asarray(y, dtype=float)
        return (y[..., 0] == 0) | (y[..., 1] == 0)

    def hessian(self, y) -> np.ndarray:
        """Analytic Hessian in the scaled coordinates, shape ``(..., 3, 3)``.

        Second derivatives blow up on {x1 = 0} and {x2 = 0}; Hessians at
        points flagged by :meth:`degenerate_mask` are NaN.
        """
        y = np.asarray(y, dtype=float)
        bad = self.degenerate_mask(y)
        y = np.where(bad[..., None], 0.5, y)  # placeholder, overwritten below
        x = self._unscaled(y)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        g, g1, g2, g11, g22 = _parts(x1, x2, self.alpha, self.beta)
        L = -np.log(g)
        phi = g / L
        d1 = 1 / L + 1 / L**2
        d2 = (1 / L**2 + 2 / L**3) / g
        s = 1 + x3**2 * d1
        H = np.empty(x.shape[:-1] + (3, 3))
        H[..., 0, 0] = g11 * s + x3**2 * d2 * g1 * g1
        H[..., 1, 1] = g22 * s + x3**2 * d2 * g2 * g2
        H[..., 0, 1] = H[..., 1, 0] = x3**2 * d2 * g1 * g2
        H[..., 0, 2] = H[..., 2, 0] = 2 * x3 * d1 * g1
        H[..., 1, 2] = H[..., 2, 1] = 2 * x3 * d1 * g2
        H[..., 2, 2] = 2 * phi
        S = np.asarray(self.scale)
        H = self.amplitude * H * S[:, None] * S[None, :]
        H[bad] = np.nan
        return H

    def hessian_fd(self, y, rel_step: float = 1e-5) -> np.ndarray:
        """Central differences of the analytic gradient (fallback/oracle)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        H = np.empty(y.shape[:-1] + (3, 3))
        for j in range(3):
            step = rel_step * np.maximum(np.abs(y[..., j]), 1e-3 if j == 2 else 0.0)
            step = np.where(step > 0, step, rel_step)
            e = np.zeros(3)
            e[j] = 1.0
            gp = self.gradient(y + step[..., None] * e)
            gm = self.gradient(y - step[..., None] * e)
            H[..., :, j] = (gp - gm) / (2 * step[..., None])
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def det_hessian(self, y) -> np.ndarray:
        return np.linalg.det(self.hessian(y))

    def leading_terms(self, y) -> np.ndarray:
        """The two dominant determinant terms for small x3 (unscaled w)."""
        x = self._unscaled(y)
        a, b = np.abs(x[..., 0]), np.abs(x[..., 1])
        L1, L2 = -np.log(a), -np.log(b)
        g = a**2 * L1**self.alpha + b / L2**self.beta
        Lg = -np.log(g)
        t1 = a**2 * L1 ** (2 * self.alpha) / (b * L2 ** (self.beta + 1) * Lg)
        t2 = L1**self.alpha / (L2 ** (1 + 2 * self.beta) * Lg)
        return t1 + t2


@dataclass(frozen=True)
class SubsolutionReport:
    min_det: float
    min_eigenvalue: float
    amplitude: float
    scale: tuple[float, float, float]
    samples: int
    indefinite_at: tuple[float, float, float] | None
    subsolution: Subsolution

    @property
    def ok(self) -> bool:
        return self.indefinite_at is None and self.min_det >= 1.0 - 1e-12


def halton_region(n: int, region, seed: int = 0, margin: float = AXIS_MARGIN) -> np.ndarray:
    """Scrambled Halton points in {margin < |y1| < r1, margin < |y2| < r2, |y3| < r3}.

    Signs are drawn from extra Halton coordinates so the sample is symmetric
    in distribution across the axes.
    """
    r1, r2, r3 = region
    u = qmc.Halton(d=5, scramble=True, seed=seed).random(n)
    y1 = margin + (r1 - margin) * u[:, 0]
    y2 = margin + (r2 - margin) * u[:, 1]
    y3 = r3 * (2 * u[:, 2] - 1)
    s1 = np.where(u[:, 3] < 0.5, -1.0, 1.0)
    s2 = np.where(u[:, 4] < 0.5, -1.0, 1.0)
    return np.column_stack([s1 * y1, s2 * y2, y3])


def verify_subsolution(sample_count: int = 10_000, region=(0.1, 0.1, 0.5), *,
                       seed: int = 0, alpha: float = 4.0, beta: float = 1.0,
                       max_halvings: int = 40) -> SubsolutionReport:
    """Find a rescaling making the Hessian PSD and det >= 1 on ``region``.

    The (x1, x2) scale is halved until every sampled Hessian is positive
    semidefinite; if that alone cannot fix a sample, the x3 scale is halved
    too.  The amplitude then lifts the sampled minimum determinant to 1.
    """
    Y = halton_region(sample_count, region, seed)
    s12, t = 1.0, 1.0
    for _ in range(max_halvings):
        W = Subsolution(1.0, (s12, s12, t), alpha, beta)
        x = Y * np.asarray(W.scale)
        if np.max(np.abs(x[:, 0])) < 0.5 and np.max(np.abs(x[:, 1])) < 0.5:
            ev = np.linalg.eigvalsh(W.hessian(Y))
            if np.all(ev[:, 0] >= 0):
                break
            bad = Y[np.argmin(ev[:, 0])]
            # an x3-driven failure at already tiny (x1, x2) scales: shrink x3
            if s12 < 1e-3 and abs(bad[2]) * t > 0.25:
                t *= 0.5
                continue
        s12 *= 0.5
    else:
        raise RuntimeError("no rescaling found that makes the sample convex")
    H = W.hessian(Y)
    ev = np.linalg.eigvalsh(H)
    det = np.linalg.det(H)
    i = int(np.argmin(det))
    amp = float((1.0 / det[i]) ** (1.0 / 3.0)) * (1 + 1e-9)
    scaled = replace(W, amplitude=amp)
    det_scaled = amp**3 * det
    return SubsolutionReport(
        min_det=float(det_scaled.min()),
        min_eigenvalue=float((amp * ev[:, 0]).min()),
        amplitude=amp,
        scale=scaled.scale,
        samples=len(Y),
        indefinite_at=None if np.all(ev[:, 0] >= 0) else tuple(Y[np.argmin(ev[:, 0])]),
        subsolution=scaled,
    )


def fd_agreement(W: Subsolution, Y: np.ndarray) -> np.ndarray:
    """Entrywise FD mismatch scaled by sqrt(|H_ii H_jj|), max per sample."""
    Ha = W.hessian(Y)
    Hf = W.hessian_fd(Y)
    d = np.sqrt(np.abs(np.einsum("...ii->...i", Ha)))
    scale = d[..., :, None] * d[..., None, :]
    return np.max(np.abs(Ha - Hf) / scale, axis=(-1, -2))
