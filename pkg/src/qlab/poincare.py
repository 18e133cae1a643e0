"""Weighted means and measured Poincaré-type ratios.

Test functions carry analytic gradients, so gradient energies do not pick up a
second discretization layer.  The ``energy="form"`` route instead uses the
edge Dirichlet form shared with :mod:`qlab.spectral`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Ball, Grid, ScalarField, axis_edges, ball_volume, ball_weights, equal_volume_radius, sphere_area
from .weights import BallOutsideBoxError, ball_mass, pair_ball


@dataclass(frozen=True, eq=False)
class TestFunction:
    """C² function on R^n: a polynomial of degree <= 4 or a trigonometric polynomial."""

    __test__ = False  # not a pytest class

    kind: str
    dim: int
    coeffs: np.ndarray
    terms: np.ndarray  # exponents (poly) or frequencies (trig), shape (k, n)

    def __call__(self, *coords):
        x = np.stack(np.broadcast_arrays(*coords), axis=-1)
        return self.value(x)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "poly":
            pw = self._powers(x)
            return sum(c * self._monomial(pw, e) for c, e in zip(self.coeffs, self.terms))
        phase = x @ self.terms.T
        a, b = self.coeffs[:, 0], self.coeffs[:, 1]
        return np.cos(phase) @ a + np.sin(phase) @ b

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        out = np.zeros(x.shape)
        if self.kind == "poly":
            pw = self._powers(x)
            for c, e in zip(self.coeffs, self.terms):
                for i in range(self.dim):
                    if e[i] == 0:
                        continue
                    ei = e.copy()
                    ei[i] -= 1
                    out[..., i] += c * e[i] * self._monomial(pw, ei)
            return out
        phase = x @ self.terms.T
        a, b = self.coeffs[:, 0], self.coeffs[:, 1]
        amp = -np.sin(phase) * a + np.cos(phase) * b
        return amp @ self.terms

    def _powers(self, x: np.ndarray) -> list:
        top = int(self.terms.max()) if len(self.terms) else 0
        table = []
        for i in range(self.dim):
            row = [np.ones(x.shape[:-1])]
            for _ in range(top):
                row.append(row[-1] * x[..., i])
            table.append(row)
        return table

    @staticmethod
    def _monomial(table: list, e) -> np.ndarray:
        out = table[0][e[0]]
        for i in range(1, len(e)):
            if e[i]:
                out = out * table[i][e[i]]
        return out

    def field(self, grid: Grid) -> ScalarField:
        return ScalarField(grid, self.value(grid.points()).reshape(grid.shape))

    def grad_norm(self, grid: Grid) -> ScalarField:
        g = self.grad(grid.points())
        return ScalarField(grid, np.linalg.norm(g, axis=1).reshape(grid.shape))


def polynomial(dim: int, coeffs, terms) -> TestFunction:
    return TestFunction("poly", dim, np.asarray(coeffs, float), np.asarray(terms, int).reshape(-1, dim))


def coordinate(dim: int, axis: int = 0) -> TestFunction:
    e = np.zeros((1, dim), int)
    e[0, axis] = 1
    return polynomial(dim, [1.0], e)


@dataclass
class TestFunctionSet:
    __test__ = False

    seed: int
    count: int
    dim: int
    functions: list = field(default_factory=list, repr=False)

    @classmethod
    def generate(cls, dim: int, count: int, seed: int = 0, degree: int = 4, freqs: int = 6, scale: float = 1.0):
        """Alternating random polynomials and trigonometric polynomials.

        Coefficients are uniform in [-1, 1]; ``scale`` rescales the argument
        so that features match the ball sizes in use.
        """
        rng = np.random.default_rng(seed)
        exps = [e for e in itertools.product(range(degree + 1), repeat=dim) if 0 < sum(e) <= degree]
        exps = np.asarray(exps, int)
        fns = []
        for k in range(count):
            if k % 2 == 0:
                c = rng.uniform(-1, 1, len(exps)) * scale ** (-exps.sum(axis=1).astype(float))
                fns.append(TestFunction("poly", dim, c, exps))
            else:
                w = rng.integers(-2, 3, size=(freqs, dim)).astype(float)
                w[np.all(w == 0, axis=1), 0] = 1.0
                c = rng.uniform(-1, 1, (freqs, 2))
                fns.append(TestFunction("trig", dim, c, w / scale))
        return cls(seed, count, dim, fns)

    def __iter__(self):
        return iter(self.functions)

    def __len__(self):
        return len(self.functions)


def _sample(f, grid: Grid) -> np.ndarray:
    if isinstance(f, ScalarField):
        return f.values.ravel()
    if isinstance(f, TestFunction):
        return f.field(grid).values.ravel()
    return np.asarray(f, float).ravel()


def _grad_norm(f, grid: Grid) -> np.ndarray:
    if isinstance(f, TestFunction):
        return f.grad_norm(grid).values.ravel()
    raise TypeError("this ratio needs a test function with an analytic gradient")


def weighted_mean(f, omega: ScalarField, ball: Ball, exact_boundary: bool = False) -> float:
    """``f_{B,ω} = ω(B)^{-1} ∫_B f ω``."""
    grid = omega.grid
    idx, w = ball_weights(grid, ball, exact_boundary)
    if len(idx) == 0:
        raise ValueError("ball contains no nodes")
    wo = w * omega.values.ravel()[idx]
    return float(np.dot(_sample(f, grid)[idx], wo) / wo.sum())


def pointwise_poincare_check(f: TestFunction, omega: ScalarField, x, y, ball: Ball | None = None):
    """``(|f(x) - f(y)|, ∫_{B_xy} (ω(B_xu)^{-(n-1)/n} + ω(B_yu)^{-(n-1)/n}) |∇f| ω^{(n-1)/n} du)``.

    The singular cells at ``u = x`` and ``u = y`` use the mean of the kernel
    over the equal-volume ball, treating ω as constant on that cell.
    """
    grid = omega.grid
    n = grid.dim
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if ball is not None:
        for p in (x, y):
            if np.linalg.norm(p - np.asarray(ball.center)) > ball.radius + 1e-12:
                raise ValueError("x and y must lie in B")
    lhs = abs(float(f.value(x) - f.value(y)))
    bxy = pair_ball(x, y)
    idx, w = ball_weights(grid, bxy, exact_boundary=True)
    pts = grid.points()[idx]
    om = omega.values.ravel()[idx]
    gn = np.linalg.norm(f.grad(pts), axis=1)
    expo = (n - 1) / n
    a = equal_volume_radius(grid)
    # ∫_{|z|<a} (|B_1| (|z|/2)^n)^{-(n-1)/n} dz, divided by the cell volume
    self_mean = (ball_volume(n) / 2**n) ** (-expo) * sphere_area(n) * a / grid.cell_volume
    kern = np.zeros(len(idx))
    for end in (x, y):
        d = np.linalg.norm(pts - end, axis=1)
        for k in range(len(idx)):
            if d[k] < 0.5 * grid.h:
                kern[k] += om[k] ** (-expo) * self_mean
            else:
                kern[k] += ball_mass(omega, pair_ball(end, pts[k])) ** (-expo)
    rhs = float(np.sum(kern * gn * om**expo * w))
    return lhs, rhs


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return 0.0 if num == 0 else math.inf


def dirichlet_form(f, omega: ScalarField, domain: np.ndarray) -> float:
    """Edge form ``Σ a_e (Δ_e f / h)^2 h^n`` with ``a_e`` the mean of ``ω^{1-2/n}`` at the ends."""
    grid = omega.grid
    n = grid.dim
    a, b = axis_edges(np.asarray(domain, bool).reshape(grid.shape))
    coef = omega.values.ravel() ** (1 - 2 / n)
    ae = 0.5 * (coef[a] + coef[b])
    v = _sample(f, grid)
    return float(np.sum(ae * (v[a] - v[b]) ** 2) * grid.h ** (n - 2))


def _oscillation(f, omega: ScalarField, ball: Ball, p: float, exact_boundary: bool) -> tuple[float, float]:
    grid = omega.grid
    idx, w = ball_weights(grid, ball, exact_boundary)
    wo = w * omega.values.ravel()[idx]
    v = _sample(f, grid)[idx]
    mean = np.dot(v, wo) / wo.sum()
    return float(np.sum(np.abs(v - mean) ** p * wo)), float(wo.sum())


def p_poincare_ratio(
    f, omega: ScalarField, ball: Ball, p: float, energy: str = "analytic", exact_boundary: bool = False
) -> float:
    """``∫_B |f - f_{B,ω}|^p ω / (ω(B)^{p/n} ∫_{2B} |∇f|^p ω^{1-p/n})``.

    0/0 is reported as 0 and x/0 as +inf.  ``energy="form"`` (p = 2 only)
    uses the discrete Dirichlet form on the nodes of 2B.
    """
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    grid = omega.grid
    n = grid.dim
    big = ball.dilate(2.0)
    if not grid.contains_ball(big.center, big.radius):
        raise BallOutsideBoxError("2B must lie inside the box")
    num, mass = _oscillation(f, omega, ball, p, exact_boundary)
    if energy == "form":
        if p != 2:
            raise ValueError("the discrete form route is quadratic")
        mask = np.zeros(grid.size, bool)
        mask[ball_weights(grid, big)[0]] = True
        den = dirichlet_form(f, omega, mask)
    else:
        idx, w = ball_weights(grid, big, exact_boundary)
        om = omega.values.ravel()[idx]
        den = float(np.sum(_grad_norm(f, grid)[idx] ** p * om ** (1 - p / n) * w))
    return _ratio(num, mass ** (p / n) * den)


def two_poincare_ratio(f, omega: ScalarField, ball: Ball, energy: str = "analytic") -> float:
    return p_poincare_ratio(f, omega, ball, 2.0, energy)


def strong_p_poincare_ratio(f, omega: ScalarField, ball: Ball, p: float, chunk: int = 2048) -> float:
    """Symmetric form: ``∫_B∫_B |f(x)-f(y)|^p ω ω / (ω(B)^{1+p/n} ∫_{2B} |∇f|^p ω^{1-p/n})``."""
    grid = omega.grid
    n = grid.dim
    idx, w = ball_weights(grid, ball)
    wo = w * omega.values.ravel()[idx]
    v = _sample(f, grid)[idx]
    if p == 2:
        mass = wo.sum()
        mean = np.dot(v, wo) / mass
        num = 2 * mass * float(np.sum((v - mean) ** 2 * wo))
    else:
        num = 0.0
        for s in range(0, len(v), chunk):
            blk = np.abs(v[s : s + chunk, None] - v[None, :]) ** p
            num += float(wo[s : s + chunk] @ blk @ wo)
    big = ball.dilate(2.0)
    bidx, bw = ball_weights(grid, big)
    om = omega.values.ravel()[bidx]
    den = float(np.sum(_grad_norm(f, grid)[bidx] ** p * om ** (1 - p / n) * bw))
    return _ratio(num, wo.sum() ** (1 + p / n) * den)


def fitted_constant(ratios) -> float:
    """Fitted Poincaré constant: the largest finite measured ratio."""
    r = np.asarray(list(ratios), float)
    r = r[np.isfinite(r)]
    return float(r.max()) if len(r) else 0.0
