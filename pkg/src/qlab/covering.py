"""Vitali coverings by geodesic balls and per-scale overlap bookkeeping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conformal import ConformalMetric, UnresolvedScaleError
from .geometry import BallEscapesBoxError, _flat, path_metric


@dataclass(eq=False)
class VitaliCover:
    """Centers ``x_j`` with disjoint ``B^g(x_j, √t)`` whose doubles cover the domain."""

    t: float
    centers: np.ndarray  # flat node indices
    domain: np.ndarray = field(repr=False)  # boolean grid-shaped mask
    slack: float = 0.0  # h · max e^u, the resolution of every distance comparison
    disjoint: bool = False
    covering: bool = False

    @property
    def radius(self) -> float:
        return math.sqrt(self.t)

    @property
    def count(self) -> int:
        return len(self.centers)

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "centers": [int(c) for c in self.centers], "slack": self.slack})

    @classmethod
    def from_json(cls, text: str, metric: ConformalMetric, domain: np.ndarray) -> "VitaliCover":
        d = json.loads(text)
        cover = cls(float(d["t"]), np.asarray(d["centers"], int), np.asarray(domain, bool), float(d["slack"]))
        return certify(cover, metric)


def _check_scale(metric: ConformalMetric, domain: np.ndarray, t: float) -> float:
    if not t > 0:
        raise ValueError("t must be positive")
    emax = float(metric.length_density[domain].max())
    slack = metric.grid.h * emax
    if math.sqrt(t) < 3 * slack:
        raise UnresolvedScaleError(f"sqrt(t) = {math.sqrt(t):.3g} is below 3 h max e^u = {3 * slack:.3g}")
    return slack


def build_cover(metric: ConformalMetric, domain, t: float) -> VitaliCover:
    """Greedy maximal packing in lexicographic node order, then certified."""
    grid = metric.grid
    domain = np.asarray(domain, bool).reshape(grid.shape)
    if not domain.any():
        raise ValueError("empty domain")
    slack = _check_scale(metric, domain, t)
    pm = path_metric(metric)
    sep = 2 * math.sqrt(t)
    nearest = np.full(grid.size, np.inf)
    centers = []
    for node in np.flatnonzero(domain.ravel()):
        if nearest[node] > sep:
            centers.append(node)
            d = pm.from_sources([node], limit=sep * (1 + 1e-9))[0]
            np.minimum(nearest, d, out=nearest)
    cover = VitaliCover(t, np.asarray(centers, int), domain, slack)
    return certify(cover, metric)


def certify(cover: VitaliCover, metric: ConformalMetric) -> VitaliCover:
    """Recompute both certificates from scratch."""
    pm = path_metric(metric)
    sep = 2 * cover.radius
    c = cover.centers
    rows = pm.from_sources(c, limit=sep * (1 + 1e-9))[:, c]
    np.fill_diagonal(rows, np.inf)
    cover.disjoint = bool(np.all(rows > sep))
    reach = pm.from_set(c, limit=sep * (1 + 1e-9))
    cover.covering = bool(np.all(reach[cover.domain.ravel()] <= sep))
    return cover


def overlap_count(cover: VitaliCover, metric: ConformalMetric, x, theta: float) -> int:
    """``#{j : d_g(x, x_j) <= θ√t}``."""
    if theta < 1:
        raise ValueError("theta must be at least 1")
    node = _flat(metric.grid, x)
    if not cover.domain.ravel()[node]:
        raise ValueError("query point lies outside the domain")
    r = theta * cover.radius
    d = path_metric(metric).from_sources([node], limit=r * (1 + 1e-9))[0]
    return int(np.sum(d[cover.centers] <= r))


def _node_ball(metric: ConformalMetric, node: int, r: float, domain: np.ndarray | None = None) -> np.ndarray:
    d = path_metric(metric).from_sources([node], limit=r * (1 + 1e-9))[0]
    mask = d <= r
    grid = metric.grid
    rim = np.ones(grid.shape, bool)
    rim[(slice(1, grid.m - 1),) * grid.dim] = False
    if np.any(mask & rim.ravel()):
        raise BallEscapesBoxError(f"geodesic ball of radius {r:.4g} reaches the box boundary")
    if domain is not None and np.any(mask & ~domain.ravel()):
        raise BallEscapesBoxError(f"geodesic ball of radius {r:.4g} leaves the domain")
    return mask


def _volume(metric: ConformalMetric, mask: np.ndarray) -> float:
    return float(metric.omega.values.ravel()[mask].sum() * metric.grid.cell_volume)


@dataclass
class OverlapVolumeCheck:
    count: int
    packed_volume: float  # count · min_j Vol(B^g(x_j, √t))
    enclosing_volume: float  # Vol(B^g(x, (1 + θ)√t))

    @property
    def holds(self) -> bool:
        return self.packed_volume <= self.enclosing_volume * (1 + 1e-12)


def overlap_volume_check(cover: VitaliCover, metric: ConformalMetric, x, theta: float) -> OverlapVolumeCheck:
    """Disjoint small balls of the counted centers sit inside ``B^g(x, (1+θ)√t)``."""
    node = _flat(metric.grid, x)
    r = theta * cover.radius
    d = path_metric(metric).from_sources([node], limit=r * (1 + 1e-9))[0]
    hit = cover.centers[d[cover.centers] <= r]
    big = _volume(metric, _node_ball(metric, node, (1 + theta) * cover.radius))
    if len(hit) == 0:
        return OverlapVolumeCheck(0, 0.0, big)
    vmin = min(_volume(metric, _node_ball(metric, int(c), cover.radius)) for c in hit)
    return OverlapVolumeCheck(len(hit), len(hit) * vmin, big)


def fit_overlap_constant(counts_theta2, kappa: float) -> float:
    """``C̃`` such that the θ = 2 counts meet ``C̃ 2^{2κ}`` with equality at the maximum."""
    return float(max(counts_theta2)) / 2 ** (2 * kappa)


@dataclass
class AnnulusResult:
    lhs: float
    rhs: float
    denominator: float  # Vol(B^g(x_j, 2√t)) for k = 0, Vol(B^g(x_j, 2^k √t)) otherwise
    doubling_slack: float  # Vol(B^g(x_j, 2√t)) / Vol(B^g(x_j, √t))

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0 else math.inf


def annuli_oscillation(cover: VitaliCover, metric: ConformalMetric, f, j: int, k: int) -> AnnulusResult:
    """Annulus energy of ``f - f_{B^g(x_j, 2√t)}`` against the scaled double integral on ``B^g(x_j, 2^{k+2}√t)``.

    Both sides carry the measure ``ω χ_domain``; the double integral uses
    ``∬ |f(x)-f(y)|² dμ dμ = 2 μ(E) ∫_E |f - f_E|² dμ``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    grid = metric.grid
    node = int(cover.centers[j])
    s = cover.radius
    v = f.field(grid).values.ravel() if hasattr(f, "field") else np.asarray(getattr(f, "values", f), float).ravel()
    w = metric.omega.values.ravel() * grid.cell_volume * cover.domain.ravel()
    d = path_metric(metric).from_sources([node], limit=2 ** (k + 2) * s * (1 + 1e-9))[0]
    outer = _node_ball(metric, node, 2 ** (k + 2) * s, cover.domain)
    b1 = d <= s
    b2 = d <= 2 * s
    annulus = outer & (d > 2 ** (k + 1) * s)
    vol1, vol2 = w[b1].sum(), w[b2].sum()
    if not annulus.any():
        return AnnulusResult(0.0, 0.0, float(vol2), float(vol2 / vol1))
    mean = float(v[b2] @ w[b2] / vol2)
    lhs = float(((v[annulus] - mean) ** 2) @ w[annulus])
    wo, vo = w[outer], v[outer]
    mo = wo.sum()
    double = 2 * mo * float(((vo - vo @ wo / mo) ** 2) @ wo)
    den = vol2 if k == 0 else float(w[d <= 2**k * s].sum())
    return AnnulusResult(lhs, float(double / den), float(den), float(vol2 / vol1))


def annuli_double_sum(metric: ConformalMetric, cover: VitaliCover, f, j: int, k: int) -> float:
    """Brute-force ``∬ |f(x)-f(y)|² dμ dμ`` over ``B^g(x_j, 2^{k+2}√t)``; O(N²) reference."""
    grid = metric.grid
    node = int(cover.centers[j])
    outer = _node_ball(metric, node, 2 ** (k + 2) * cover.radius, cover.domain)
    v = f.field(grid).values.ravel()[outer] if hasattr(f, "field") else np.asarray(f, float).ravel()[outer]
    w = (metric.omega.values.ravel() * grid.cell_volume * cover.domain.ravel())[outer]
    return float(w @ ((v[:, None] - v[None, :]) ** 2) @ w)
