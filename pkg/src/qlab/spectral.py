"""The weighted Laplacian on ``L²(ω χ_{2B} dx)`` and its functional calculus.

``L f = -ω^{-1} Σ_i ∂_i (ω^{1-2/n} ∂_i f)`` is taken with the sign that makes
it nonnegative, and realized through its quadratic form on the grid nodes of
``2B``: edge terms ``a_e (Δ_e f / h)^2 h^n`` and mass ``ω h^n`` per node.  The
restriction of the form to 2B gives the natural (zero co-normal flux)
boundary condition.  Everything below is the generalized symmetric problem
``K v = λ M v`` with diagonal ``M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gamma

from .conformal import ConformalMetric
from .geometry import path_metric
from .grid import Ball, Grid, ScalarField, axis_edges, ball_weights, equal_volume_radius, sphere_area
from .weights import BallOutsideBoxError, PathMetric

DENSE_LIMIT = 4000


class ConvergenceError(RuntimeError):
    pass


def _weight_of(source) -> ScalarField:
    return source.omega if isinstance(source, ConformalMetric) else source


@dataclass(eq=False)
class WeightedOperator:
    grid: Grid
    ball: Ball  # B; the operator lives on 2B
    nodes: np.ndarray  # flat grid indices of the domain (nodes of 2B)
    omega: np.ndarray  # weight on the domain nodes
    mass: np.ndarray  # ω h^n
    stiffness: sp.csr_matrix
    edges: tuple = field(repr=False, default=())

    @property
    def size(self) -> int:
        return len(self.nodes)

    def restrict(self, values) -> np.ndarray:
        """Grid field (or flat array) -> vector on the domain nodes."""
        v = values.values if isinstance(values, ScalarField) else np.asarray(values, float)
        return v.ravel()[self.nodes]

    def extend(self, vec: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.grid.size, fill)
        out[self.nodes] = vec
        return out.reshape(self.grid.shape)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (self.stiffness @ f) / self.mass

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(f * g * self.mass))

    def norm(self, f: np.ndarray, where: np.ndarray | None = None) -> float:
        w = self.mass if where is None else self.mass * where
        return math.sqrt(float(np.sum(f * f * w)))

    def form(self, f: np.ndarray) -> float:
        return float(f @ (self.stiffness @ f))

    def inner_ball_mask(self) -> np.ndarray:
        """Domain nodes that belong to B itself."""
        c = np.asarray(self.ball.center)
        pts = self.grid.points()[self.nodes]
        return np.linalg.norm(pts - c, axis=1) <= self.ball.radius * (1 + 1e-12)


def assemble(source, ball: Ball) -> WeightedOperator:
    """Weighted Laplacian of ``ω = e^{nu}`` (or a given weight) on the nodes of ``2B``."""
    omega = _weight_of(source)
    grid = omega.grid
    n = grid.dim
    big = ball.dilate(2.0)
    if not grid.contains_ball(big.center, big.radius):
        raise BallOutsideBoxError("2B must lie inside the box")
    w = omega.values.ravel()
    if np.any(w <= 0):
        raise ValueError("degenerate weight on 2B")
    nodes, _ = ball_weights(grid, big)
    nodes = np.sort(nodes)
    mask = np.zeros(grid.size, bool)
    mask[nodes] = True
    a, b = axis_edges(mask.reshape(grid.shape))
    local = np.full(grid.size, -1)
    local[nodes] = np.arange(len(nodes))
    ia, ib = local[a], local[b]
    coef = w ** (1 - 2 / n)
    ae = 0.5 * (coef[a] + coef[b]) * grid.h ** (n - 2)
    N = len(nodes)
    K = sp.coo_matrix(
        (np.concatenate([ae, ae, -ae, -ae]), (np.concatenate([ia, ib, ia, ib]), np.concatenate([ia, ib, ib, ia]))),
        shape=(N, N),
    ).tocsr()
    om = w[nodes]
    return WeightedOperator(grid, ball, nodes, om, om * grid.cell_volume, K, (ia, ib, ae))


@dataclass(eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    vectors: np.ndarray  # columns, μ₂-orthonormal
    mass: np.ndarray
    complete: bool
    residual: float = 0.0

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, float)
        w = self.mass if f.ndim == 1 else self.mass[:, None]
        return self.vectors.T @ (w * f)

    def projection_residual(self, f: np.ndarray) -> float:
        c = self.coefficients(f)
        r = f - self.vectors @ c
        nf = math.sqrt(float(np.sum(self.mass * f * f)))
        return math.sqrt(float(np.sum(self.mass * r * r))) / nf if nf > 0 else 0.0


def eig(op: WeightedOperator, k: int | None = None, tol: float = 1e-10) -> SpectralDecomposition:
    """Lowest ``k`` eigenpairs (all of them when ``k`` is None) in the μ₂ inner product."""
    N = op.size
    k = N if k is None else int(k)
    if not 1 <= k <= N:
        raise ValueError(f"k must lie in [1, {N}]")
    s = 1.0 / np.sqrt(op.mass)
    if N <= DENSE_LIMIT or k > N // 2:
        A = (op.stiffness.toarray() * s[:, None]) * s[None, :]
        vals, W = sla.eigh(A, subset_by_index=(0, k - 1))
        V = W * s[:, None]
    else:
        M = sp.diags(op.mass)
        scale = float(op.stiffness.diagonal().max() / op.mass.min())
        sigma = -1e-6 * scale
        try:
            vals, V = spla.eigsh(op.stiffness, k=k, M=M, sigma=sigma, which="LM", tol=tol * 1e-2)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(f"eigsh did not converge: {exc}") from exc
        order = np.argsort(vals)
        vals, V = vals[order], V[:, order]
        V = V / np.sqrt(np.sum(V * V * op.mass[:, None], axis=0))
    # the constants span the kernel exactly
    V[:, 0] = 1.0 / math.sqrt(op.mass.sum())
    vals = np.array(vals, float)
    vals[0] = 0.0
    vals = np.maximum(vals, 0.0)
    R = op.stiffness @ V - (op.mass[:, None] * V) * vals[None, :]
    res = float(np.max(np.sqrt(np.sum(R * R / op.mass[:, None], axis=0))))
    return SpectralDecomposition(vals, V, op.mass, k == N, res)


@dataclass
class FracResult:
    values: np.ndarray
    norm: float
    truncation: float


def frac_apply(dec: SpectralDecomposition, s: float, f: np.ndarray, max_truncation: float = 1e-6) -> FracResult:
    """``L^s f`` through the eigenbasis, with its μ₂ norm and the projection residual."""
    if not s > 0:
        raise ValueError("power must be positive")
    c = dec.coefficients(f)
    lam_s = dec.eigenvalues**s
    trunc = dec.projection_residual(f)
    if trunc > max_truncation:
        raise ConvergenceError(f"truncated expansion loses {trunc:.2e} of f")
    out = dec.vectors @ (lam_s * c)
    return FracResult(out, math.sqrt(float(np.sum((lam_s * c) ** 2))), trunc)


def frac_norm_sq(dec: SpectralDecomposition, s: float, f: np.ndarray) -> float:
    """``‖L^s f‖²_{μ₂}``."""
    c = dec.coefficients(np.asarray(f))
    lam = dec.eigenvalues
    p = np.where(lam > 0, lam, 1.0) ** (2 * s) * (lam > 0)
    return float(p @ (c * c)) if c.ndim == 1 else p @ (c * c)


def resolvent(op: WeightedOperator, t: float, f: np.ndarray, solver=None):
    """``((I + tL)^{-1} f, tL (I + tL)^{-1} f)`` by a sparse solve of ``(M + tK) x = M f``."""
    if not t > 0:
        raise ValueError("t must be positive")
    solve = solver or spla.factorized((sp.diags(op.mass) + t * op.stiffness).tocsc())
    x = solve(op.mass * f)
    return x, f - x


def resolvent_spectral(dec: SpectralDecomposition, t: float, f: np.ndarray):
    c = dec.coefficients(f)
    lam = dec.eigenvalues
    x = dec.vectors @ (c / (1 + t * lam))
    y = dec.vectors @ (c * t * lam / (1 + t * lam))
    return x, y


@dataclass
class DecayFit:
    slope: float
    intercept: float
    r2: float
    distance: float
    ts: np.ndarray
    values: np.ndarray
    f_norm: float


def off_diagonal_decay(
    op: WeightedOperator,
    E: np.ndarray,
    F: np.ndarray,
    f: np.ndarray,
    ts,
    distance: float | None = None,
    path: PathMetric | None = None,
) -> DecayFit:
    """Fit ``log(‖(I+tL)^{-1}f‖_F + ‖tL(I+tL)^{-1}f‖_F) - log ‖f‖`` against ``d/√t``.

    ``E`` and ``F`` are boolean masks over the domain nodes and ``f`` must
    vanish off ``E``.  ``d`` is the path distance between the sets.
    """
    E = np.asarray(E, bool)
    F = np.asarray(F, bool)
    if not F.any():
        raise ValueError("F is empty")
    if np.any(f[~E] != 0):
        raise ValueError("f must be supported in E")
    if distance is None:
        if path is None:
            raise ValueError("need a path metric to measure d(E, F)")
        dE = path.from_set(op.nodes[E])
        distance = float(dE[op.nodes[F]].min())
    if not distance > 0:
        raise ValueError("E and F must be at positive distance")
    fn = op.norm(f, E)
    vals = []
    for t in ts:
        x, y = resolvent(op, t, f)
        vals.append(op.norm(x, F) + op.norm(y, F))
    vals = np.asarray(vals)
    ts = np.asarray(ts, float)
    X = distance / np.sqrt(ts)
    Y = np.log(vals / fn)
    slope, intercept = np.polyfit(X, Y, 1)
    pred = slope * X + intercept
    ss_res = float(np.sum((Y - pred) ** 2))
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(slope), float(intercept), r2, distance, ts, vals, fn)


def square_function_constant(alpha: float) -> float:
    """``∫_0^∞ s^{1-α/2} (1+s)^{-2} ds = Γ(2-α/2) Γ(α/2)``."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    return float(gamma(2 - alpha / 2) * gamma(alpha / 2))


def square_function(dec: SpectralDecomposition, f: np.ndarray, alpha: float) -> float:
    """``∫_0^∞ t^{-1-α/2} ‖tL(I+tL)^{-1} f‖² dt``, exactly mode by mode."""
    return square_function_constant(alpha) * frac_norm_sq(dec, alpha / 4, f)


def square_function_quadrature(
    dec: SpectralDecomposition, f: np.ndarray, alpha: float, panels_per_unit: int = 1, order: int = 24
) -> float:
    """The same integral by Gauss–Legendre panels in ``log t`` plus asymptotic tails.

    Integration window ``[10^-4/λ_max, 10^4/λ_1]``; beyond it the integrand is
    replaced by its first three Taylor terms in ``tλ`` (below) or ``1/(tλ)`` (above).
    """
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    c = dec.coefficients(f)
    lam = dec.eigenvalues
    keep = lam > 0
    lam, w = lam[keep], (c * c)[keep]
    if len(lam) == 0:
        return 0.0
    a = alpha / 2
    t0 = 1e-4 / lam.max()
    t1 = 1e4 / lam.min()
    x0, x1 = math.log(t0), math.log(t1)
    npan = max(1, int(math.ceil((x1 - x0) * panels_per_unit)))
    xg, wg = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(x0, x1, npan + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xg
        t = np.exp(x)
        s = t[:, None] * lam[None, :]
        integrand = np.exp(-a * x) * ((s / (1 + s)) ** 2 @ w)
        total += 0.5 * (hi - lo) * float(wg @ integrand)
    # small t: (tλ)^2 (1 - 2tλ + 3(tλ)^2)
    low = (
        lam**2 * t0 ** (2 - a) / (2 - a)
        - 2 * lam**3 * t0 ** (3 - a) / (3 - a)
        + 3 * lam**4 * t0 ** (4 - a) / (4 - a)
    )
    # large t: 1 - 2/(tλ) + 3/(tλ)^2
    high = t1 ** (-a) / a - 2 * t1 ** (-1 - a) / (lam * (1 + a)) + 3 * t1 ** (-2 - a) / (lam**2 * (2 + a))
    return total + float(w @ low) + float(w @ high)


# -- both sides of the fractional Poincaré inequality ---------------------------------


@dataclass
class Theorem1Result:
    lhs: float
    mid: float
    rhs: float
    excluded_bound: float
    alpha: float

    @property
    def lhs_over_mid(self) -> float:
        return _safe(self.lhs, self.mid)

    @property
    def mid_over_rhs(self) -> float:
        return _safe(self.mid, self.rhs)

    @property
    def lhs_over_rhs(self) -> float:
        return _safe(self.lhs, self.rhs)


def _safe(a: float, b: float) -> float:
    if b > 0:
        return a / b
    return 0.0 if a == 0 else math.inf


class Theorem1Workspace:
    """Shared state for evaluating all three fractional-Poincaré quantities on one ball.

    Holds the operator on 2B, its full eigendecomposition, and g-distances
    between domain nodes.  With ``max_sources`` below the node count the
    double integral uses stratified source sampling (cubic blocks of nodes,
    one seeded source per block) with exact inner sums, combined by a
    Horvitz–Thompson estimator over the observed pairs.
    """

    def __init__(
        self,
        metric: ConformalMetric,
        ball: Ball,
        max_sources: int | None = None,
        seed: int = 0,
        path: PathMetric | None = None,
    ):
        self.metric = metric
        self.ball = ball
        self.op = assemble(metric, ball)
        self.dec = eig(self.op)
        self.in_b = self.op.inner_ball_mask()
        path = path or path_metric(metric)
        N = self.op.size
        if max_sources is None or max_sources >= N:
            self.sources = np.arange(N)
            self.block = np.arange(N)
        else:
            self.sources, self.block = self._stratify(max_sources, seed)
        # inclusion probability of each node: one uniform draw per block
        self.inclusion = 1.0 / np.bincount(self.block)[self.block]
        # a straight stencil path inside the convex set 2B bounds every needed distance
        wmax = float(metric.length_density.ravel()[self.op.nodes].max())
        limit = 1.1 * 4 * ball.radius * wmax + 4 * metric.grid.h * wmax
        D = np.empty((len(self.sources), N))
        for s in range(0, len(self.sources), 256):
            rows = path.from_sources(self.op.nodes[self.sources[s : s + 256]], limit=limit)
            D[s : s + 256] = rows[:, self.op.nodes]
        missing = np.flatnonzero(~np.all(np.isfinite(D), axis=1))
        if len(missing):
            D[missing] = path.from_sources(self.op.nodes[self.sources[missing]])[:, self.op.nodes]
        self.distances = D
        self._kernels: dict[float, np.ndarray] = {}

    def _stratify(self, max_sources: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """One seeded uniform source per cubic block of about ``N / max_sources`` nodes.

        Returns the sources and the block label of every domain node.
        """
        grid = self.metric.grid
        n = grid.dim
        pts = grid.points()[self.op.nodes]
        side = max(1, int(round((self.op.size / max_sources) ** (1 / n))))
        cells = np.floor((pts - pts.min(axis=0)) / (side * grid.h) + 1e-9).astype(int)
        keys = np.ravel_multi_index(cells.T, tuple(cells.max(axis=0) + 1))
        _, label = np.unique(keys, return_inverse=True)
        order = np.argsort(label, kind="stable")
        _, starts = np.unique(label[order], return_index=True)
        rng = np.random.default_rng(seed)
        sources = [int(rng.choice(block)) for block in np.split(order, starts[1:])]
        return np.asarray(sources), label.ravel()

    def _pair_weights(self) -> np.ndarray:
        """Horvitz–Thompson weights for the pairs seen from the sampled rows.

        An unordered pair is observed when either end is a source, with
        probability ``p_x + p_y - p_x p_y`` (``p_x + p_y`` inside one block).
        Pairs of two sources are seen from both rows and count half each time.
        """
        ps = self.inclusion[self.sources][:, None]
        py = self.inclusion[None, :]
        same = self.block[self.sources][:, None] == self.block[None, :]
        pi = ps + py - np.where(same, 0.0, ps * py)
        is_source = np.zeros(self.op.size, bool)
        is_source[self.sources] = True
        return np.where(is_source[None, :], 1.0, 2.0) / pi

    @property
    def exact(self) -> bool:
        return len(self.sources) == self.op.size

    def kernel(self, alpha: float) -> np.ndarray:
        K = self._kernels.get(alpha)
        if K is None:
            n = self.metric.grid.dim
            D = self.distances
            with np.errstate(divide="ignore"):
                K = np.where(D > 0, D ** (-(n + alpha)), 0.0)
            K[np.arange(len(self.sources)), self.sources] = 0.0
            w = self.op.mass
            K = K * w[self.sources][:, None] * w[None, :] * self._pair_weights()
            self._kernels[alpha] = K
        return K

    def lhs(self, F: np.ndarray) -> np.ndarray:
        m = self.op.mass * self.in_b
        mean = (m @ F) / m.sum()
        return m @ (F - mean) ** 2

    def mid(self, F: np.ndarray, alpha: float) -> np.ndarray:
        return frac_norm_sq(self.dec, alpha / 4, F)

    def rhs(self, F: np.ndarray, alpha: float) -> np.ndarray:
        K = self.kernel(alpha)
        Fs = F[self.sources]
        # Σ_y K_xy (f_x - f_y)^2 = f_x^2 Σ_y K_xy - 2 f_x (K f)_x + (K f^2)_x
        row = K.sum(axis=1)
        KF = K @ F
        KF2 = K @ (F * F)
        total = (Fs * Fs * row[:, None]).sum(0) - 2 * (Fs * KF).sum(0) + KF2.sum(0)
        # the expansion cancels for near-constant f; the sum itself is nonnegative
        return np.maximum(total, 0.0)

    def excluded_bound(self, G: np.ndarray, alpha: float) -> np.ndarray:
        """Estimate of the omitted diagonal cells: ``Σ_x |∇f(x)|² ω(x)² ∫_{|z|<a} |z|^{2-n-α} dz · h^n / n``."""
        grid = self.metric.grid
        n = grid.dim
        a = equal_volume_radius(grid)
        cell = sphere_area(n) * a ** (2 - alpha) / (2 - alpha) / n
        w = self.op.omega**2 * grid.cell_volume
        return (w * cell) @ (G * G)

    def evaluate(self, F: np.ndarray, alpha: float, G: np.ndarray | None = None) -> list[Theorem1Result]:
        """Results for the columns of ``F`` (domain values); ``G`` holds gradient norms."""
        F = np.asarray(F, float)
        if F.ndim == 1:
            F = F[:, None]
        if not 0 < alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        lhs, mid, rhs = self.lhs(F), self.mid(F, alpha), self.rhs(F, alpha)
        exc = self.excluded_bound(G, alpha) if G is not None else np.full(F.shape[1], np.nan)
        return [Theorem1Result(float(a), float(b), float(c), float(e), alpha) for a, b, c, e in zip(lhs, mid, rhs, exc)]


def theorem1_check(metric: ConformalMetric, ball: Ball, f, alpha: float, workspace: Theorem1Workspace | None = None):
    """``(lhs, mid, rhs)``: mean oscillation on B, ``‖L^{α/4} f‖²``, and the singular double integral on 2B."""
    ws = workspace or Theorem1Workspace(metric, ball)
    grid = metric.grid
    vals = f.field(grid).values if hasattr(f, "field") else (f.values if isinstance(f, ScalarField) else np.asarray(f))
    F = ws.op.restrict(vals)
    G = ws.op.restrict(f.grad_norm(grid).values) if hasattr(f, "grad_norm") else None
    return ws.evaluate(F, alpha, G[:, None] if G is not None else None)[0]


def measure_ratio(ws_or_op, dec: SpectralDecomposition, f: np.ndarray) -> float:
    """``∫_B (f - f_B)² ω / (ω(B)^{2/n} ‖L^{1/2} f‖²)`` computed spectrally."""
    op = ws_or_op
    n = op.grid.dim
    m = op.mass * op.inner_ball_mask()
    mean = (m @ f) / m.sum()
    num = float(m @ (f - mean) ** 2)
    return _safe(num, m.sum() ** (2 / n) * frac_norm_sq(dec, 0.5, f))
