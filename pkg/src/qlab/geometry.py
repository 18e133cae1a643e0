"""Geodesic distance, geodesic balls, volume growth and isoperimetric ratios.

For ``ω = e^{nu}`` the length density ``ω^{1/n}`` equals ``e^u``, so the
Riemannian distance of ``g`` is the weighted path distance of the weights
module evaluated on the metric's own graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from .conformal import ConformalMetric, RadialProfile
from .grid import Grid, sphere_area
from .weights import PathMetric


class BallEscapesBoxError(ValueError):
    pass


_METRIC_CACHE: dict[tuple, tuple[ConformalMetric, PathMetric]] = {}


def path_metric(metric: ConformalMetric, reach: int | None = None) -> PathMetric:
    """The (cached) stencil path metric of ``g``."""
    key = (id(metric), reach)
    hit = _METRIC_CACHE.get(key)
    if hit is not None and hit[0] is metric:
        return hit[1]
    pm = PathMetric(metric.grid, metric.length_density, reach)
    if len(_METRIC_CACHE) > 16:
        _METRIC_CACHE.clear()
    _METRIC_CACHE[key] = (metric, pm)
    return pm


def _flat(grid: Grid, point) -> int:
    # an int is a flat node index; any sequence is a coordinate, snapped to the nearest node
    if isinstance(point, (int, np.integer)):
        return int(point)
    idx, _ = grid.snap(point)
    return grid.flat_index(idx)


def geodesic_distance(metric: ConformalMetric, x, y) -> float:
    """``d_g(x, y)`` between coordinates (snapped to nodes) or flat node indices."""
    g = metric.grid
    return path_metric(metric).distance(_flat(g, x), _flat(g, y))


def distance_field(metric: ConformalMetric, center, limit: float = np.inf) -> np.ndarray:
    pm = path_metric(metric)
    return pm.from_sources([_flat(metric.grid, center)], limit=limit)[0].reshape(metric.grid.shape)


def _rim_mask(grid: Grid, width: int = 3) -> np.ndarray:
    mask = np.ones(grid.shape, dtype=bool)
    mask[(slice(width, grid.m - width),) * grid.dim] = False
    return mask


@dataclass(eq=False)
class GeodesicBall:
    center: int
    radius: float
    mask: np.ndarray
    volume: float
    boundary_area: float
    distances: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.mask.sum())


def geodesic_ball(
    metric: ConformalMetric,
    center,
    r: float,
    volume: str = "nodes",
    samples_per_cell: int = 1,
    seed: int = 0,
) -> GeodesicBall:
    """Node set ``{x : d_g(center, x) <= r}`` and its g-volume.

    ``volume="mc"`` replaces node counting by stratified Monte Carlo (one
    jittered sample per cell by default) on the interpolated distance field.
    Raises :class:`BallEscapesBoxError` instead of truncating at the box.
    """
    grid = metric.grid
    c = _flat(grid, center)
    dist = distance_field(metric, c, limit=r * (1 + 1e-12) + 4 * grid.h * float(metric.length_density.max()))
    mask = dist <= r
    if np.any(mask & _rim_mask(grid)):
        raise BallEscapesBoxError(f"geodesic ball of radius {r} reaches the box boundary")
    omega = metric.omega.values
    if volume == "nodes":
        vol = float(np.sum(omega[mask]) * grid.cell_volume)
    elif volume == "mc":
        vol = _mc_volume(metric, dist, r, samples_per_cell, seed)
    else:
        raise ValueError(f"unknown volume method {volume!r}")
    return GeodesicBall(c, r, mask, vol, boundary_area(metric, mask), dist)


def _mc_volume(metric: ConformalMetric, dist: np.ndarray, r: float, spc: int, seed: int) -> float:
    grid = metric.grid
    rng = np.random.default_rng(seed)
    near = dist <= r + 2 * grid.h * float(metric.length_density.max())
    idx = np.argwhere(near)
    finite = np.where(np.isfinite(dist), dist, 10 * r + 1)
    d_int = RegularGridInterpolator([grid.axis] * grid.dim, finite)
    u_int = RegularGridInterpolator([grid.axis] * grid.dim, metric.u.values)
    pts = grid.axis[idx][:, None, :] + (rng.random((len(idx), spc, grid.dim)) - 0.5) * grid.h
    pts = np.clip(pts.reshape(-1, grid.dim), -grid.axis[-1], grid.axis[-1])
    inside = d_int(pts) <= r
    w = np.exp(grid.dim * u_int(pts[inside]))
    return float(w.sum() * grid.cell_volume / spc)


def boundary_area(metric: ConformalMetric, mask: np.ndarray) -> float:
    """Face-counting ``|∂Ω|_g``: each cut face weighs ``e^{(n-1)u}`` at its center times ``h^{n-1}``."""
    grid = metric.grid
    n = grid.dim
    u = metric.u.values
    total = 0.0
    for ax in range(n):
        lo = [slice(None)] * n
        hi = [slice(None)] * n
        lo[ax] = slice(0, grid.m - 1)
        hi[ax] = slice(1, grid.m)
        lo, hi = tuple(lo), tuple(hi)
        cut = mask[lo] != mask[hi]
        uf = 0.5 * (u[lo] + u[hi])
        total += float(np.sum(np.exp((n - 1) * uf[cut])))
    return total * grid.h ** (n - 1)


def isoperimetric_ratio(metric: ConformalMetric, region: np.ndarray) -> float:
    """``|Ω|_g^{(n-1)/n} / |∂Ω|_g`` for a node set strictly inside the box."""
    grid = metric.grid
    region = np.asarray(region, dtype=bool).reshape(grid.shape)
    if not region.any():
        raise ValueError("empty region")
    if np.any(region & _rim_mask(grid, 1)):
        raise ValueError("region touches the box boundary")
    n = grid.dim
    vol = float(np.sum(metric.omega.values[region]) * grid.cell_volume)
    return vol ** ((n - 1) / n) / boundary_area(metric, region)


@dataclass
class GrowthTable:
    rows: list  # (r, Vol_g, Vol_g / r^n)

    @property
    def upper(self) -> float:
        return max(row[2] for row in self.rows)

    @property
    def lower(self) -> float:
        return min(row[2] for row in self.rows)

    def to_csv(self) -> str:
        lines = ["r,volume,ratio"]
        lines += [f"{r!r},{v!r},{q!r}" for r, v, q in self.rows]
        return "\n".join(lines) + "\n"


def volume_growth_table(metric: ConformalMetric, center, radii: Sequence[float], **kw) -> GrowthTable:
    n = metric.grid.dim
    rows = []
    for r in radii:
        b = geodesic_ball(metric, center, r, **kw)
        rows.append((float(r), b.volume, b.volume / r**n))
    return GrowthTable(rows)


# -- radial 1D route ------------------------------------------------------------


class RadialGeometry:
    """Exact 1D quadrature for a radial metric ``e^{2u(|x|)}|dx|^2``.

    Lengths along rays are ``∫ e^{u(s)} ds`` and volumes of Euclidean balls
    centred at the origin are ``|S^{n-1}| ∫ e^{nu(s)} s^{n-1} ds``; geodesic
    balls about the origin are those Euclidean balls.
    """

    def __init__(self, profile: RadialProfile, r_max: float = 1e12, nodes_per_decade: int = 400):
        self.profile = profile
        n = profile.dim
        s = np.concatenate([np.linspace(0.0, 1e-6, 200)[:-1], np.geomspace(1e-6, r_max, int(nodes_per_decade * math.log10(r_max / 1e-6)))])
        u = profile.u(s)
        self.s = s
        self.length = integrate.cumulative_trapezoid(np.exp(u), s, initial=0.0)
        self.volume = sphere_area(n) * integrate.cumulative_trapezoid(np.exp(n * u) * s ** (n - 1), s, initial=0.0)

    @property
    def dim(self) -> int:
        return self.profile.dim

    def euclidean_radius(self, r_g: float) -> float:
        """Euclidean radius of the geodesic ball of g-radius ``r_g`` about the origin."""
        if r_g > self.length[-1]:
            raise BallEscapesBoxError("geodesic radius beyond the tabulated range")
        return float(np.interp(r_g, self.length, self.s))

    def ball_volume(self, r_g: float) -> float:
        R = self.euclidean_radius(r_g)
        return float(np.interp(R, self.s, self.volume))

    def ray_distance(self, r1: float, r2: float) -> float:
        a, b = np.interp([r1, r2], self.s, self.length)
        return float(abs(b - a))

    def boundary_area(self, R):
        n = self.dim
        R = np.asarray(R, float)
        return sphere_area(n) * R ** (n - 1) * np.exp((n - 1) * self.profile.u(R))

    def euclidean_ball_volume(self, R):
        return np.interp(R, self.s, self.volume)


def radial_volume_growth(geo: RadialGeometry, radii: Sequence[float]) -> GrowthTable:
    n = geo.dim
    return GrowthTable([(float(r), geo.ball_volume(r), geo.ball_volume(r) / r**n) for r in radii])


def end_ratio_radial(geo: RadialGeometry, radii: Sequence[float]) -> tuple[float, np.ndarray]:
    """Isoperimetric ratio of Euclidean balls ``B(0, R)`` along an increasing sweep.

    n = 2: ``L^2 / (4π A)``; n = 4: ``|∂B|^{4/3} / (4 (2π²)^{1/3} |B|)``.
    Both equal 1 for the flat metric.  Returns the last value and the sweep.
    """
    R = np.asarray(radii, float)
    if np.any(np.diff(R) <= 0):
        raise ValueError("radii must increase")
    L = geo.boundary_area(R)
    V = geo.euclidean_ball_volume(R)
    if geo.dim == 2:
        ratio = L**2 / (4 * math.pi * V)
    elif geo.dim == 4:
        ratio = L ** (4 / 3) / (4 * (2 * math.pi**2) ** (1 / 3) * V)
    else:
        raise ValueError("end ratio implemented for n in {2, 4}")
    return float(ratio[-1]), ratio
