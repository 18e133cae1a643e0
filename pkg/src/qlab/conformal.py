"""Normal conformal factors from Q-curvature data.

A normal metric ``g = e^{2u}|dx|^2`` has

    u(x) = (1/c_n) ∫ log(|y| / |x - y|) Q(y) dv_g(y) + C,

and on the flat background ``(-Δ)^{n/2} u = 2 Q e^{nu}``.

Normalization note for n = 2: the flat-background equation reads
``-Δu = 2 Q e^{2u}`` while the Gauss curvature satisfies ``-Δu = K e^{2u}``,
so ``Q = K / 2`` here.  ``β⁺ < π`` is the same condition as ``∫K⁺ < 2π``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import fft, integrate

from .grid import (
    Grid,
    ScalarField,
    equal_volume_radius,
    interior_mask,
    laplacian_power,
    sphere_area,
)


class NonIntegrableError(ValueError):
    pass


class UnresolvedScaleError(ValueError):
    pass


def sharp_constant(n: int) -> float:
    """``c_n = 2^{n-2} ((n-2)/2)! π^{n/2}`` (π for n=2, 4π² for n=4)."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2, got {n}")
    return 2.0 ** (n - 2) * math.factorial((n - 2) // 2) * math.pi ** (n / 2)


def _mean_log_ball(radius: float, n: int) -> float:
    # average of log|z| over the ball of the given radius in R^n
    return math.log(radius) - 1.0 / n


@dataclass(frozen=True)
class Bump:
    center: tuple[float, ...]
    mass: float
    sigma: float

    def density(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        n = len(coords)
        r2 = sum((x - c) ** 2 for x, c in zip(coords, self.center))
        norm = (2 * math.pi * self.sigma**2) ** (-n / 2)
        return self.mass * norm * np.exp(-r2 / (2 * self.sigma**2))


@dataclass(frozen=True, eq=False)
class QSpec:
    """Prescribed Q-curvature as the measure ``Q dv_g = Q e^{nu} dx``.

    Build with :meth:`zero`, :meth:`bumps`, :meth:`radial` or :meth:`gridded`.
    For ``radial`` the profile is the measure density as a function of ``|x|``
    and must vanish beyond ``support``.
    """

    kind: str
    dim: int
    bump_list: tuple[Bump, ...] = ()
    profile: Callable[[np.ndarray], np.ndarray] | None = None
    support: float = 0.0
    field: ScalarField | None = None

    @classmethod
    def zero(cls, n: int) -> "QSpec":
        return cls("zero", n)

    @classmethod
    def bumps(cls, n: int, items: Sequence[tuple[Sequence[float], float, float]]) -> "QSpec":
        bl = []
        for center, mass, sigma in items:
            if len(center) != n:
                raise ValueError("bump center has wrong dimension")
            if not sigma > 0:
                raise ValueError("mollifier scale must be positive")
            bl.append(Bump(tuple(float(c) for c in center), float(mass), float(sigma)))
        return cls("bump_sum", n, bump_list=tuple(bl))

    @classmethod
    def radial(cls, n: int, profile: Callable[[np.ndarray], np.ndarray], support: float) -> "QSpec":
        return cls("radial_profile", n, profile=profile, support=float(support))

    @classmethod
    def gridded(cls, density: ScalarField) -> "QSpec":
        return cls("gridded", density.grid.dim, field=density)

    def density(self, grid: Grid) -> ScalarField:
        """Measure density ``Q e^{nu}`` sampled on ``grid``."""
        if grid.dim != self.dim:
            raise ValueError("grid dimension does not match the QSpec")
        if self.kind == "zero":
            return ScalarField.constant(grid, 0.0)
        if self.kind == "bump_sum":
            for b in self.bump_list:
                if b.sigma < 3 * grid.h:
                    raise UnresolvedScaleError(
                        f"mollifier scale {b.sigma} below 3h = {3 * grid.h}"
                    )
            coords = grid.mesh()
            vals = sum(b.density(coords) for b in self.bump_list)
            return ScalarField(grid, vals)
        if self.kind == "radial_profile":
            if self.support > grid.halfwidth:
                raise NonIntegrableError("radial profile support exceeds the box")
            r = grid.radius()
            vals = np.where(r <= self.support, self.profile(r), 0.0)
            return ScalarField(grid, vals)
        if self.field.grid != grid:
            raise ValueError("gridded QSpec lives on a different grid")
        return self.field

    @cached_property
    def _totals(self) -> tuple[float, float]:
        if self.kind == "zero":
            return 0.0, 0.0
        if self.kind == "bump_sum":
            return _bump_totals(self.bump_list)
        if self.kind == "radial_profile":
            area = sphere_area(self.dim)
            n = self.dim

            def part(sign):
                g = lambda r: max(sign * float(self.profile(np.asarray(r))), 0.0) * r ** (n - 1)
                val, err = integrate.quad(g, 0.0, self.support, limit=200)
                if not math.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
                    raise NonIntegrableError("radial profile does not integrate")
                return area * val

            return part(1.0), part(-1.0)
        vals = self.field.values
        w = self.field.grid.trapezoid_weights
        return float(np.sum(np.maximum(vals, 0) * w)), float(np.sum(np.maximum(-vals, 0) * w))

    @property
    def beta_plus(self) -> float:
        return self._totals[0]

    @property
    def beta_minus(self) -> float:
        return self._totals[1]


def _bump_totals(bumps: Sequence[Bump]) -> tuple[float, float]:
    pos = [b for b in bumps if b.mass > 0]
    neg = [b for b in bumps if b.mass < 0]
    for p in pos:
        for q in neg:
            gap = math.dist(p.center, q.center)
            if gap < 12 * max(p.sigma, q.sigma):
                raise NonIntegrableError(
                    "opposite-sign bumps overlap; use a gridded QSpec to split Q into Q+ and Q-"
                )
    return sum(b.mass for b in pos), -sum(b.mass for b in neg)


def total_curvatures(q: QSpec) -> tuple[float, float]:
    """``(β⁺, β⁻)``: masses of the positive and negative parts of the Q measure."""
    return q.beta_plus, q.beta_minus


@dataclass(frozen=True, eq=False)
class ConformalMetric:
    """``g = e^{2u}|dx|^2`` sampled on a grid, with volume weight ``ω = e^{nu}``."""

    grid: Grid
    u: ScalarField
    C: float = 0.0
    qspec: QSpec | None = None
    meta: dict = field(default_factory=dict)

    @cached_property
    def omega(self) -> ScalarField:
        return ScalarField(self.grid, np.exp(self.grid.dim * self.u.values))

    @cached_property
    def length_density(self) -> np.ndarray:
        return np.exp(self.u.values)

    @classmethod
    def from_u(cls, grid: Grid, u: Callable[..., np.ndarray] | np.ndarray, C: float = 0.0, **meta):
        """Metric from a directly prescribed conformal factor (``C`` is added)."""
        vals = ScalarField.from_function(grid, u).values if callable(u) else np.asarray(u, float)
        return cls(grid, ScalarField(grid, vals + C), C, None, dict(meta))

    def shifted(self, dc: float) -> "ConformalMetric":
        return ConformalMetric(
            self.grid, ScalarField(self.grid, self.u.values + dc), self.C + dc, self.qspec, dict(self.meta)
        )


def _log_kernel(grid: Grid) -> np.ndarray:
    """``-log|z|`` on all offsets, laid out circularly for a size ``2m-1`` FFT."""
    m, n, h = grid.m, grid.dim, grid.h
    P = 2 * m - 1
    off = np.arange(P)
    off = np.where(off <= m - 1, off, off - P) * h
    r2 = sum(c**2 for c in np.meshgrid(*([off] * n), indexing="ij", sparse=True))
    with np.errstate(divide="ignore"):
        k = -0.5 * np.log(r2)
    k[(0,) * n] = -_mean_log_ball(equal_volume_radius(grid), n)
    return k


def _source_weights(density: ScalarField) -> np.ndarray:
    return density.values * density.grid.trapezoid_weights


def _log_abs_y(grid: Grid) -> np.ndarray:
    r = grid.radius()
    with np.errstate(divide="ignore"):
        out = np.log(r)
    out[(grid.center_index,) * grid.dim] = _mean_log_ball(equal_volume_radius(grid), grid.dim)
    return out


def log_potential_u(q: QSpec, grid: Grid, C: float = 0.0) -> ConformalMetric:
    """Sample the normal conformal factor of ``q`` on ``grid``.

    Trapezoidal quadrature of the log kernel, evaluated for all targets at once
    by a circulant embedding (FFT of size ``2m-1`` per axis).  The singular
    cell uses the exact mean of the kernel over the equal-volume ball.
    """
    n = grid.dim
    cn = sharp_constant(n)
    if q.kind != "gridded":
        bp, bm = total_curvatures(q)
        if not (math.isfinite(bp) and math.isfinite(bm)):
            raise NonIntegrableError("total curvature is not finite")
        if bp >= cn:
            warnings.warn(f"β⁺ = {bp:.6g} is not below c_{n} = {cn:.6g}", stacklevel=2)
    density = q.density(grid)
    s = _source_weights(density)
    P = 2 * grid.m - 1
    kern = _log_kernel(grid)
    conv = fft.irfftn(fft.rfftn(s, (P,) * n) * fft.rfftn(kern), (P,) * n)
    conv = conv[(slice(0, grid.m),) * n]
    const = float(np.sum(s * _log_abs_y(grid)))
    u = (conv + const) / cn + C
    return ConformalMetric(grid, ScalarField(grid, u), C, q)


def log_potential_at(q: QSpec, grid: Grid, points: np.ndarray, C: float = 0.0) -> np.ndarray:
    """Same quadrature as :func:`log_potential_u`, at arbitrary points (e.g. far field)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    density = q.density(grid)
    s = _source_weights(density).ravel()
    keep = s != 0
    ys = grid.points()[keep]
    s = s[keep]
    a = equal_volume_radius(grid)
    self_log = _mean_log_ball(a, grid.dim)
    ry = np.linalg.norm(ys, axis=1)
    log_y = np.where(ry > 0, np.log(np.where(ry > 0, ry, 1.0)), self_log)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        d = np.linalg.norm(ys - p, axis=1)
        log_d = np.where(d > 0, np.log(np.where(d > 0, d, 1.0)), self_log)
        out[i] = np.dot(s, log_y - log_d)
    return out / sharp_constant(grid.dim) + C


def measure_from_u(metric: ConformalMetric) -> ScalarField:
    """``Q e^{nu} = (-Δ)^{n/2} u / 2`` on the interior band."""
    lap = laplacian_power(metric.u, metric.grid.dim // 2)
    return ScalarField(metric.grid, 0.5 * lap.values, lap.band)


def q_from_u(metric: ConformalMetric) -> ScalarField:
    """Q-curvature ``(-Δ)^{n/2} u / (2 e^{nu})``; zero outside the valid band."""
    meas = measure_from_u(metric)
    vals = np.where(interior_mask(metric.grid, meas.band), meas.values / metric.omega.values, 0.0)
    return ScalarField(metric.grid, vals, meas.band)


def normality_fit(metric: ConformalMetric) -> tuple[float, float]:
    """``(residual, C)`` comparing ``u`` with the log potential of its own Q.

    The residual is the oscillation ``max - min`` of ``u - ũ`` on the interior
    band; ``C`` is the midrange constant.
    """
    meas = measure_from_u(metric)
    rebuilt = log_potential_u(QSpec.gridded(ScalarField(metric.grid, meas.values)), metric.grid)
    diff = (metric.u.values - rebuilt.u.values)[interior_mask(metric.grid, meas.band)]
    hi, lo = float(diff.max()), float(diff.min())
    return hi - lo, 0.5 * (hi + lo)


def normality_residual(metric: ConformalMetric) -> float:
    return normality_fit(metric)[0]


# -- exact radial route -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Radially symmetric conformal factor ``u(|x|)`` known to high accuracy.

    Used as an independent 1D oracle for the grid machinery and for
    quantities (end ratios, large geodesic balls) that no desk-size grid reaches.
    """

    dim: int
    u: Callable[[np.ndarray], np.ndarray]
    name: str = "radial"

    def length_density(self, r):
        return np.exp(self.u(np.asarray(r, dtype=float)))


def radial_log_potential(
    n: int,
    density: Callable[[np.ndarray], np.ndarray],
    support: float,
    C: float = 0.0,
    nodes: int = 4000,
) -> RadialProfile:
    """Normal conformal factor of a radial measure density, by 1D quadrature.

    Uses the spherical means of the log kernel (Newton's theorem and its
    biharmonic analogue in R^4), so ``u(R)`` only needs 1D moments of the
    mass distribution ``dm = |S^{n-1}| s^{n-1} ρ(s) ds``.
    """
    if n not in (2, 4):
        raise ValueError("radial route supports n in {2, 4}")
    cn = sharp_constant(n)
    area = sphere_area(n)
    # Gauss–Legendre panels on [0, support]
    xg, wg = np.polynomial.legendre.leggauss(16)
    edges = np.linspace(0.0, support, nodes // 16 + 1)
    s = ((edges[:-1, None] + edges[1:, None]) / 2 + (edges[1:, None] - edges[:-1, None]) / 2 * xg).ravel()
    w = ((edges[1:, None] - edges[:-1, None]) / 2 * wg).ravel()
    dm = area * s ** (n - 1) * density(s) * w
    logs = np.log(s)
    cum_m = np.concatenate([[0.0], np.cumsum(dm)])
    cum_logm = np.concatenate([[0.0], np.cumsum(dm * logs)])
    cum_s2m = np.concatenate([[0.0], np.cumsum(dm * s**2)])
    tail_sm2 = np.concatenate([np.cumsum((dm / s**2)[::-1])[::-1], [0.0]])

    def u_of_r(r):
        r = np.asarray(r, dtype=float)
        k = np.searchsorted(s, r)
        rr = np.where(r > 0, r, 1.0)
        if n == 2:
            val = cum_logm[k] - np.log(rr) * cum_m[k]
        else:
            # mean of log|x-y| over |y|=s: log s + R²/4s² (R<s), log R + s²/4R² (R>s)
            val = cum_logm[k] - np.log(rr) * cum_m[k] - cum_s2m[k] / (4 * rr**2) - rr**2 * tail_sm2[k] / 4
        # at r = 0 the kernel mean equals log s for every shell
        val = np.where(r > 0, val, 0.0)
        return val / cn + C

    return RadialProfile(n, u_of_r, "log_potential")


def gaussian_radial_density(n: int, mass: float, sigma: float):
    norm = mass * (2 * math.pi * sigma**2) ** (-n / 2)
    return lambda r: norm * np.exp(-np.asarray(r) ** 2 / (2 * sigma**2))


def cylinder_profile(n: int = 2, cap: float = 1.0) -> RadialProfile:
    """``u = -log max(|x|, cap)``: a half cylinder closed by a flat cap.

    Its total Q-curvature is exactly ``c_n`` in n = 2 (concentrated on the
    cap circle), the sharp threshold.
    """
    return RadialProfile(n, lambda r: -np.log(np.maximum(np.asarray(r, dtype=float), cap)), "cylinder")
