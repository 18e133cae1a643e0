"""Cartesian grids, sampled fields, quadrature and finite-difference stencils.

Every other module works on a :class:`Grid` covering the box ``[-L, L]^n``
with ``m`` nodes per axis.  ``m`` is odd so the origin is always a node.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

SUPPORTED_DIMS = (2, 4)
MAX_M_DIM4 = 33

_HEADER = struct.Struct("<iid")  # n, m, L


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dim: int
    halfwidth: float
    m: int

    def __post_init__(self):
        if self.dim not in SUPPORTED_DIMS:
            raise ValueError(f"dimension must be one of {SUPPORTED_DIMS}, got {self.dim}")
        if self.m < 3 or self.m % 2 == 0:
            raise ValueError(f"nodes per axis must be odd and >= 3, got {self.m}")
        if not self.halfwidth > 0:
            raise ValueError(f"halfwidth must be positive, got {self.halfwidth}")
        if self.dim == 4 and self.m > MAX_M_DIM4:
            raise ValueError(f"n=4 grids are capped at m <= {MAX_M_DIM4}")

    @property
    def h(self) -> float:
        return 2.0 * self.halfwidth / (self.m - 1)

    @property
    def center_index(self) -> int:
        return (self.m - 1) // 2

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.dim

    @property
    def size(self) -> int:
        return self.m**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        # (i - c) * h keeps the origin exact and makes coordinates a pure function of (i, L, m)
        return (np.arange(self.m) - self.center_index) * self.h

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.axis] * self.dim), indexing="ij"))

    def points(self) -> np.ndarray:
        """All node coordinates as an ``(size, dim)`` array in row-major order."""
        return np.stack([c.ravel() for c in self.mesh()], axis=1)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return self.axis[np.asarray(index)]

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c**2 for c in self.mesh()))

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        w1 = np.full(self.m, self.h)
        w1[0] = w1[-1] = self.h / 2
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w

    def snap(self, point: Sequence[float]) -> tuple[tuple[int, ...], float]:
        """Nearest node to ``point`` and the snapping displacement."""
        p = np.asarray(point, dtype=float)
        idx = np.clip(np.rint(p / self.h).astype(int) + self.center_index, 0, self.m - 1)
        return tuple(int(i) for i in idx), float(np.linalg.norm(self.axis[idx] - p))

    def flat_index(self, index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(index), self.shape))

    def contains_ball(self, center: Sequence[float], radius: float) -> bool:
        c = np.asarray(center, dtype=float)
        return bool(np.all(np.abs(c) + radius <= self.halfwidth + 1e-12))


def build_grid(n: int, halfwidth: float, m: int) -> Grid:
    return Grid(int(n), float(halfwidth), int(m))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on every node of ``grid``.

    ``band`` marks how many rim layers are invalid (stencil outputs); callers
    read only ``values[interior(band)]``.
    """

    grid: Grid
    values: np.ndarray
    band: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[..., np.ndarray]) -> "ScalarField":
        """Sample ``func(x1, ..., xn)`` (broadcasting coordinate arrays) on the nodes."""
        return cls(grid, np.broadcast_to(func(*grid.mesh()), grid.shape).copy())

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    def interior(self) -> tuple[slice, ...]:
        return interior_slices(self.grid, self.band)

    def __neg__(self):
        return ScalarField(self.grid, -self.values, self.band)

    def scaled(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, factor * self.values, self.band)

    def to_bytes(self) -> bytes:
        g = self.grid
        return _HEADER.pack(g.dim, g.m, g.halfwidth) + self.values.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ScalarField":
        n, m, L = _HEADER.unpack_from(blob)
        grid = build_grid(n, L, m)
        vals = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        return cls(grid, vals.reshape(grid.shape).copy())

    def to_csv(self, max_nodes: int = 100_000) -> str:
        if self.grid.size > max_nodes:
            raise ValueError(f"grid too large for CSV export ({self.grid.size} nodes)")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(self.grid.dim)] + ["value"])
        for p, v in zip(self.grid.points(), self.values.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        return buf.getvalue()


def interior_slices(grid: Grid, band: int) -> tuple[slice, ...]:
    return (slice(band, grid.m - band),) * grid.dim


def interior_mask(grid: Grid, band: int) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    mask[interior_slices(grid, band)] = True
    return mask


def _check_same_grid(*fields: ScalarField) -> None:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError("fields live on different grids")


def integrate(field: ScalarField, weight: ScalarField | None = None) -> float:
    """Trapezoidal value of the integral of ``field * weight`` over the box."""
    vals = field.values
    if weight is not None:
        _check_same_grid(field, weight)
        vals = vals * weight.values
    return float(np.sum(vals * field.grid.trapezoid_weights))


def neg_laplacian(values: np.ndarray, h: float) -> np.ndarray:
    """Standard (2n+1)-point ``-Δ`` on the interior; the outer rim is left at zero."""
    n = values.ndim
    out = np.zeros_like(values)
    core = (slice(1, -1),) * n
    acc = 2.0 * n * values[core]
    for ax in range(n):
        lo = list(core)
        hi = list(core)
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        acc = acc - values[tuple(lo)] - values[tuple(hi)]
    out[core] = acc / h**2
    return out


def laplacian_power(field: ScalarField, k: int) -> ScalarField:
    """``(-Δ)^k field`` with the discrete stencil; valid ``k`` layers in from the rim."""
    if k not in (1, 2):
        raise ValueError(f"k must be 1 or 2, got {k}")
    vals = field.values
    for _ in range(k):
        vals = neg_laplacian(vals, field.grid.h)
    band = field.band + k
    vals = np.where(interior_mask(field.grid, band), vals, 0.0)
    return ScalarField(field.grid, vals, band)


# -- Euclidean ball quadrature ------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def dilate(self, factor: float) -> "Ball":
        return Ball(self.center, self.radius * factor)


def _bbox(grid: Grid, center: np.ndarray, reach: float) -> tuple[slice, ...]:
    c = grid.center_index
    lo = np.floor((center - reach) / grid.h).astype(int) + c
    hi = np.ceil((center + reach) / grid.h).astype(int) + c
    lo = np.clip(lo, 0, grid.m - 1)
    hi = np.clip(hi, 0, grid.m - 1)
    return tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))


def ball_weights(
    grid: Grid, ball: Ball, exact_boundary: bool = False, subsamples: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights for integration over a Euclidean ball.

    With ``exact_boundary=False`` a node counts fully iff it lies in the closed
    ball.  Otherwise each node carries the fraction of its cell inside the ball,
    estimated by a midpoint sub-lattice on cells cut by the sphere.

    Returns flat node indices and weights (already multiplied by ``h^n``).
    """
    center = np.asarray(ball.center, dtype=float)
    r = float(ball.radius)
    h = grid.h
    sl = _bbox(grid, center, r + h)
    sub_axes = [grid.axis[s] for s in sl]
    coords = np.meshgrid(*sub_axes, indexing="ij")
    dist = np.sqrt(sum((x - c) ** 2 for x, c in zip(coords, center)))
    local_idx = np.meshgrid(*[np.arange(s.start, s.stop) for s in sl], indexing="ij")
    flat = np.ravel_multi_index(tuple(local_idx), grid.shape)

    if not exact_boundary:
        inside = dist <= r * (1 + 1e-12)
        return flat[inside], np.full(int(inside.sum()), grid.cell_volume)

    half_diag = 0.5 * h * math.sqrt(grid.dim)
    full = dist + half_diag <= r
    cut = (dist - half_diag < r) & ~full
    frac = full.astype(float)
    if np.any(cut):
        s = subsamples or (8 if grid.dim == 2 else 3)
        offs = (np.arange(s) + 0.5) / s - 0.5
        sub = np.stack(np.meshgrid(*([offs] * grid.dim), indexing="ij"), -1).reshape(-1, grid.dim) * h
        pts = np.stack([x[cut] for x in coords], axis=1)
        d2 = np.sum((pts[:, None, :] + sub[None, :, :] - center) ** 2, axis=2)
        frac[cut] = np.mean(d2 <= r * r, axis=1)
    keep = frac > 0
    return flat[keep], frac[keep] * grid.cell_volume


def ball_mask(grid: Grid, ball: Ball) -> np.ndarray:
    mask = np.zeros(grid.size, dtype=bool)
    idx, _ = ball_weights(grid, ball)
    mask[idx] = True
    return mask.reshape(grid.shape)


def ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def sphere_area(n: int) -> float:
    """Area of the unit sphere S^{n-1}."""
    return n * ball_volume(n)


def equal_volume_radius(grid: Grid) -> float:
    """Radius of the ball whose volume equals one grid cell."""
    return (grid.cell_volume / ball_volume(grid.dim)) ** (1.0 / grid.dim)


# -- stencil graph for path metrics -------------------------------------------


def stencil_offsets(dim: int, reach: int | None = None) -> list[tuple[int, ...]]:
    """Neighbour offsets of the path-metric stencil (one per undirected edge).

    ``dim == 2``: primitive integer vectors with max-norm <= ``reach``
    (reach 2 is the 16-neighbourhood, reach 3 the 32-neighbourhood).
    ``dim == 4``: all axis and diagonal neighbours (entries in {-1, 0, 1}).
    """
    if dim == 2:
        reach = 3 if reach is None else reach
        offs = []
        for a in range(-reach, reach + 1):
            for b in range(-reach, reach + 1):
                if (a, b) != (0, 0) and math.gcd(a, b) == 1:
                    offs.append((a, b))
    else:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=dim) if any(o)]
    # keep one representative per +/- pair
    return [o for o in offs if o > tuple(-x for x in o)]


@dataclass(frozen=True, eq=False)
class StencilGraph:
    grid: Grid
    matrix: sp.csr_matrix
    reach: int | None = None
    offsets: list = field(default_factory=list)


def stencil_graph(grid: Grid, root_weight: np.ndarray, reach: int | None = None) -> StencilGraph:
    """Grid graph whose edge ``(a, b)`` costs ``|a - b| * (w(a) + w(b)) / 2``.

    ``root_weight`` is the length density (``ω^{1/n}`` or ``e^u``).
    """
    w = np.asarray(root_weight, dtype=float).reshape(grid.shape)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("length density must be finite and nonnegative")
    offsets = stencil_offsets(grid.dim, reach)
    ids = np.arange(grid.size).reshape(grid.shape)
    rows, cols, costs = [], [], []
    # zero-cost edges would vanish from the sparse structure
    tiny = np.finfo(float).tiny
    for o in offsets:
        src = tuple(slice(max(0, -k), grid.m - max(0, k)) for k in o)
        dst = tuple(slice(max(0, k), grid.m - max(0, -k)) for k in o)
        length = grid.h * math.sqrt(sum(k * k for k in o))
        c = np.maximum(length * 0.5 * (w[src] + w[dst]), tiny).ravel()
        a = ids[src].ravel()
        b = ids[dst].ravel()
        rows += [a, b]
        cols += [b, a]
        costs += [c, c]
    mat = sp.csr_matrix(
        (np.concatenate(costs), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    return StencilGraph(grid, mat, reach, offsets)


def axis_edges(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat node-index pairs of axis-neighbour edges with both ends in ``mask``."""
    dim = mask.ndim
    m = mask.shape[0]
    ids = np.arange(mask.size).reshape(mask.shape)
    a_all, b_all = [], []
    for ax in range(dim):
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[ax] = slice(0, m - 1)
        hi[ax] = slice(1, m)
        both = mask[tuple(lo)] & mask[tuple(hi)]
        a_all.append(ids[tuple(lo)][both])
        b_all.append(ids[tuple(hi)][both])
    return np.concatenate(a_all), np.concatenate(b_all)
