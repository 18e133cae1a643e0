"""Muckenhoupt-type constants, doubling, and the two weighted distances.

Suprema over all balls are replaced by maxima over seeded samples, so every
constant reported here is a lower bound for the true one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csgraph

from .grid import Ball, Grid, ScalarField, ball_weights, stencil_graph


class BallOutsideBoxError(ValueError):
    pass


@dataclass
class WeightReport:
    ap_bounds: dict = field(default_factory=dict)
    doubling_constant: float = float("nan")
    doubling_exponent: float = float("nan")
    reverse_holder: tuple = ()
    strong_ainf: dict = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["ap_bounds"] = {str(k): v for k, v in self.ap_bounds.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WeightReport":
        d = json.loads(text)
        d["ap_bounds"] = {float(k): v for k, v in d["ap_bounds"].items()}
        d["reverse_holder"] = tuple(d["reverse_holder"])
        return cls(**d)


def sample_balls(
    grid: Grid,
    count: int = 200,
    seed: int = 0,
    r_min: float | None = None,
    r_max: float | None = None,
    dilation: float = 1.0,
) -> list[Ball]:
    """Seeded balls with log-uniform radii whose ``dilation``-fold dilates fit in the box."""
    rng = np.random.default_rng(seed)
    L = grid.halfwidth
    r_min = 3 * grid.h if r_min is None else r_min
    r_max = 0.45 * L / dilation if r_max is None else r_max
    if r_max * dilation >= L or r_min > r_max:
        raise BallOutsideBoxError("no admissible ball radii for this box")
    radii = np.exp(rng.uniform(math.log(r_min), math.log(r_max), count))
    balls = []
    for r in radii:
        span = L - dilation * r
        c = rng.uniform(-span, span, grid.dim)
        balls.append(Ball(tuple(float(x) for x in c), float(r)))
    return balls


def _check_inside(grid: Grid, ball: Ball) -> None:
    if not grid.contains_ball(ball.center, ball.radius):
        raise BallOutsideBoxError(f"ball {ball} leaves the box")


def ball_mass(omega: ScalarField, ball: Ball, exact_boundary: bool = True) -> float:
    _check_inside(omega.grid, ball)
    idx, w = ball_weights(omega.grid, ball, exact_boundary)
    return float(np.dot(omega.values.ravel()[idx], w))


def _ball_mean(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(values[idx], w) / w.sum())


def ap_constant(omega: ScalarField, p: float, balls: Iterable[Ball]) -> float:
    """Largest Muckenhoupt A_p expression over ``balls``."""
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    vals = omega.values.ravel()
    if np.any(vals <= 0):
        raise ValueError("A_p needs a strictly positive weight")
    dual = vals ** (-1.0 / (p - 1))
    best = 0.0
    for b in balls:
        _check_inside(omega.grid, b)
        idx, w = ball_weights(omega.grid, b, exact_boundary=True)
        best = max(best, _ball_mean(vals, idx, w) * _ball_mean(dual, idx, w) ** (p - 1))
    return best


def reverse_holder_check(omega: ScalarField, r: float, balls: Iterable[Ball]) -> float:
    """Largest ``(avg ω^r)^{1/r} / avg ω`` over ``balls``."""
    if not r > 1:
        raise ValueError(f"exponent must exceed 1, got {r}")
    vals = omega.values.ravel()
    best = 0.0
    for b in balls:
        _check_inside(omega.grid, b)
        idx, w = ball_weights(omega.grid, b, exact_boundary=True)
        best = max(best, _ball_mean(vals**r, idx, w) ** (1 / r) / _ball_mean(vals, idx, w))
    return best


def doubling_constant(omega: ScalarField, balls: Iterable[Ball]) -> tuple[float, float]:
    """``(max ω(2B)/ω(B), log2 of it)`` over ``balls``."""
    best = 0.0
    for b in balls:
        best = max(best, ball_mass(omega, b.dilate(2.0)) / ball_mass(omega, b))
    return best, math.log2(best)


def pair_ball(x: Sequence[float], y: Sequence[float]) -> Ball:
    """The ball with diameter the segment ``xy``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return Ball(tuple((x + y) / 2), float(np.linalg.norm(x - y) / 2))


def delta_distance(omega: ScalarField, x: Sequence[float], y: Sequence[float]) -> float:
    """``(∫_{B_xy} ω)^{1/n}``."""
    return ball_mass(omega, pair_ball(x, y)) ** (1.0 / omega.grid.dim)


class PathMetric:
    """Shortest paths on the stencil graph of a length density.

    Graph construction is done once; queries are independent and read-only.
    """

    def __init__(self, grid: Grid, length_density: np.ndarray, reach: int | None = None):
        self.grid = grid
        self.length_density = np.asarray(length_density, float).reshape(grid.shape)
        self.graph = stencil_graph(grid, self.length_density, reach)

    @classmethod
    def from_weight(cls, omega: ScalarField, reach: int | None = None) -> "PathMetric":
        return cls(omega.grid, omega.values ** (1.0 / omega.grid.dim), reach)

    def from_sources(self, sources, limit: float = np.inf) -> np.ndarray:
        """Distances from each flat source index to every node (rows)."""
        src = np.atleast_1d(np.asarray(sources, dtype=int))
        return csgraph.dijkstra(self.graph.matrix, directed=True, indices=src, limit=limit)

    def from_set(self, sources, limit: float = np.inf) -> np.ndarray:
        """Distance from the node set ``sources`` to every node (one sweep)."""
        src = np.atleast_1d(np.asarray(sources, dtype=int))
        return csgraph.dijkstra(
            self.graph.matrix, directed=True, indices=src, limit=limit, min_only=True
        )

    def distance(self, a: int, b: int) -> float:
        return float(self.from_sources([a])[0, b])


def snap_positive(omega: ScalarField, point: Sequence[float]) -> tuple[tuple[int, ...], float]:
    """Nearest node carrying positive weight, and the snapping displacement.

    On the null set of a degenerate weight every pair of points is at
    path distance zero, so points are moved off it.
    """
    grid = omega.grid
    idx, disp = grid.snap(point)
    if omega.values[idx] > 0:
        return idx, disp
    p = np.asarray(point, float)
    pts = grid.points()
    ok = omega.values.ravel() > 0
    d = np.linalg.norm(pts - p, axis=1)
    d[~ok] = np.inf
    k = int(np.argmin(d))
    return tuple(int(i) for i in np.unravel_index(k, grid.shape)), float(d[k])


def d_distance(
    omega: ScalarField, x: Sequence[float], y: Sequence[float], metric: PathMetric | None = None
) -> float:
    """Path distance with length density ``ω^{1/n}`` between the snapped points."""
    metric = metric or PathMetric.from_weight(omega)
    grid = omega.grid
    a, _ = snap_positive(omega, x)
    b, _ = snap_positive(omega, y)
    return metric.distance(grid.flat_index(a), grid.flat_index(b))


def sample_pairs(
    grid: Grid,
    count: int,
    seed: int = 0,
    min_len: float | None = None,
    max_len: float | None = None,
) -> np.ndarray:
    """Seeded point pairs ``(count, 2, n)`` whose balls ``B_xy`` fit in the box."""
    rng = np.random.default_rng(seed)
    L = grid.halfwidth
    min_len = 8 * grid.h if min_len is None else min_len
    max_len = 0.8 * L if max_len is None else max_len
    min_len = min(min_len, max_len / 2)
    lens = np.exp(rng.uniform(math.log(min_len), math.log(max_len), count))
    dirs = rng.normal(size=(count, grid.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    span = (L - lens / 2 - grid.h)[:, None]
    mids = rng.uniform(-1, 1, (count, grid.dim)) * span
    return np.stack([mids - dirs * lens[:, None] / 2, mids + dirs * lens[:, None] / 2], axis=1)


@dataclass
class StrongAinfResult:
    max_delta_over_d: float
    max_d_over_delta: float
    count: int
    seed: int | None
    max_snap: float
    ratios: np.ndarray = field(repr=False, default=None)

    @property
    def bound(self) -> float:
        return max(self.max_delta_over_d, self.max_d_over_delta)

    def as_dict(self) -> dict:
        return {
            "max_delta_over_d": self.max_delta_over_d,
            "max_d_over_delta": self.max_d_over_delta,
            "count": self.count,
            "seed": self.seed,
            "max_snap": self.max_snap,
        }


def strong_ainfty_ratio(
    omega: ScalarField,
    pairs: np.ndarray,
    seed: int | None = None,
    metric: PathMetric | None = None,
    chunk: int = 64,
) -> StrongAinfResult:
    """Extremal ``δ_ω/d_ω`` and ``d_ω/δ_ω`` over ``pairs`` (snapped to nodes)."""
    grid = omega.grid
    metric = metric or PathMetric.from_weight(omega)
    pairs = np.asarray(pairs, float)
    src, dst, deltas, snaps, bounds = [], [], [], [], []
    for x, y in pairs:
        a, da = snap_positive(omega, x)
        b, db = snap_positive(omega, y)
        xa, yb = grid.node(a), grid.node(b)
        deltas.append(delta_distance(omega, xa, yb))
        src.append(grid.flat_index(a))
        dst.append(grid.flat_index(b))
        snaps.append(max(da, db))
        # a generous upper bound on the path length keeps the sweeps local
        ball = pair_ball(xa, yb)
        idx, _ = ball_weights(grid, ball.dilate(1.0) if ball.radius > grid.h else Ball(ball.center, 2 * grid.h))
        wmax = float(metric.length_density.ravel()[idx].max()) if len(idx) else 1.0
        bounds.append(2.0 * np.linalg.norm(xa - yb) * max(wmax, 1e-300) + 4 * grid.h * wmax)
    src = np.asarray(src)
    dst = np.asarray(dst)
    d = np.empty(len(src))
    order = np.argsort(bounds)
    for s in range(0, len(order), chunk):
        sel = order[s : s + chunk]
        lim = float(max(bounds[i] for i in sel))
        rows = metric.from_sources(src[sel], limit=lim)
        d[sel] = rows[np.arange(len(sel)), dst[sel]]
    missing = ~np.isfinite(d)
    if np.any(missing):
        rows = metric.from_sources(src[missing])
        d[missing] = rows[np.arange(missing.sum()), dst[missing]]
    delta = np.asarray(deltas)
    with np.errstate(divide="ignore"):
        r = delta / d
    return StrongAinfResult(
        float(np.max(r)), float(np.max(1 / r)), len(pairs), seed, float(max(snaps, default=0.0)), r
    )


def weight_report(
    omega: ScalarField,
    seed: int = 0,
    ps: Sequence[float] = (2.0,),
    rh_exponent: float = 1.5,
    n_balls: int = 200,
    n_pairs: int = 200,
    r_min: float | None = None,
) -> WeightReport:
    balls = sample_balls(omega.grid, n_balls, seed, r_min=r_min, dilation=2.0)
    rep = WeightReport(seed=seed)
    if np.all(omega.values > 0):
        rep.ap_bounds = {float(p): ap_constant(omega, p, balls) for p in ps}
    rep.reverse_holder = (rh_exponent, reverse_holder_check(omega, rh_exponent, balls))
    rep.doubling_constant, rep.doubling_exponent = doubling_constant(omega, balls)
    pairs = sample_pairs(omega.grid, n_pairs, seed + 1)
    rep.strong_ainf = strong_ainfty_ratio(omega, pairs, seed + 1).as_dict()
    return rep


def hyperplane_pairs(grid: Grid, count: int, seed: int = 0, axis: int = 0) -> np.ndarray:
    """Seeded pairs lying on the hyperplane ``x_axis = 0``, shape ``(count, 2, n)``."""
    pairs = sample_pairs(grid, count, seed)
    pairs[:, :, axis] = 0.0
    lens = np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=1)
    bad = lens < 2 * grid.h
    pairs[bad, 1, (axis + 1) % grid.dim] += 4 * grid.h * np.sign(pairs[bad, 1, (axis + 1) % grid.dim] + 0.5)
    return pairs
