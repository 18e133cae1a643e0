"""Scenario configuration: TOML parsing, validation and the built-in library."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .conformal import (
    ConformalMetric,
    QSpec,
    RadialProfile,
    cylinder_profile,
    gaussian_radial_density,
    log_potential_u,
    radial_log_potential,
    sharp_constant,
)
from .grid import Ball, Grid, ScalarField, build_grid, equal_volume_radius

STAGES = ("metric", "weights", "geometry", "poincare", "spectral", "covering")
STAGE_DEPS = {
    "metric": (),
    "weights": ("metric",),
    "geometry": ("metric",),
    "poincare": ("metric",),
    "spectral": ("metric",),
    "covering": ("metric", "weights"),
}
DIRECT_U = ("quadratic", "cylinder")
DIRECT_WEIGHT = ("power", "axis")


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    dim: int = 2
    halfwidth: float = 4.0
    m: int = 129
    description: str = ""
    seed: int = 0
    q: dict | None = None  # {"kind": "zero"} or {"kind": "bumps", "bumps": [...]}
    u: dict | None = None  # direct conformal factor: quadratic, cylinder
    weight: dict | None = None  # direct weight: power |x|^a, axis |x_1|^a
    balls: list = field(default_factory=list)  # [(center, radius)]
    alphas: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    ps: list = field(default_factory=lambda: [2.0])
    functions: int = 6
    stages: list = field(default_factory=lambda: list(STAGES))
    growth_radii: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    radial_radii: list = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0])
    n_balls: int = 100
    n_pairs: int = 200
    ball_r_min: float | None = None  # smallest sampled ball radius (default 3h)
    cover_sqrt_t: float | None = None  # default: smallest resolvable scale, at least 0.25
    cover_halfwidth: float | None = None  # covering domain is this central box (default L/2)
    n_queries: int = 20
    max_sources: int | None = None
    normal_tol: float = 0.05

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {k: copy.deepcopy(v) for k, v in self.__dict__.items()}
        d["balls"] = [{"center": list(c), "radius": r} for c, r in self.balls]
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def grid(self) -> Grid:
        return build_grid(self.dim, self.halfwidth, self.m)

    def ball_objects(self) -> list[Ball]:
        return [Ball(tuple(float(x) for x in c), float(r)) for c, r in self.balls]

    def stage_order(self) -> list[str]:
        ts = TopologicalSorter({s: [d for d in STAGE_DEPS[s]] for s in self.stages})
        try:
            order = list(ts.static_order())
        except CycleError as exc:  # pragma: no cover - the dependency table is acyclic
            raise ConfigError(str(exc)) from exc
        return [s for s in STAGES if s in order]

    # -- metric construction ----------------------------------------------------

    def qspec(self) -> QSpec | None:
        if self.q is None:
            return None
        kind = self.q.get("kind", "zero")
        if kind == "zero":
            return QSpec.zero(self.dim)
        cn = sharp_constant(self.dim)
        items = []
        for b in self.q["bumps"]:
            mass = b["mass"] if "mass" in b else b["mass_fraction"] * cn
            items.append((tuple(b.get("center", [0.0] * self.dim)), float(mass), float(b["sigma"])))
        return QSpec.bumps(self.dim, items)

    def build(self) -> tuple[ConformalMetric | None, ScalarField]:
        """``(metric, ω)``; the metric is None for weights with zeros."""
        grid = self.grid
        if self.q is not None:
            metric = log_potential_u(self.qspec(), grid)
            return metric, metric.omega
        if self.u is not None:
            kind = self.u["kind"]
            if kind == "quadratic":
                def uf(*x):
                    return x[0] ** 2 - x[1] ** 2
            else:
                prof = cylinder_profile(self.dim, self.u.get("cap", 1.0))

                def uf(*x):
                    return prof.u(np.sqrt(sum(c * c for c in x)))
            metric = ConformalMetric.from_u(grid, uf, scenario=self.name)
            return metric, metric.omega
        kind = self.weight["kind"]
        a = float(self.weight.get("alpha", 1.0))
        n = self.dim
        if kind == "power":
            r = grid.radius()
            vals = r**a
            # origin node: mean of |x|^a over the equal-volume ball
            vals[(grid.center_index,) * n] = n * equal_volume_radius(grid) ** a / (a + n)
            omega = ScalarField(grid, vals)
            return ConformalMetric.from_u(grid, np.log(vals) / n, scenario=self.name), omega
        vals = np.abs(grid.mesh()[0]) ** a
        return None, ScalarField(grid, vals)

    def radial_profile(self) -> RadialProfile | None:
        """Exact 1D profile when the conformal factor is radial about the origin."""
        if self.u is not None and self.u["kind"] == "cylinder":
            return cylinder_profile(self.dim, self.u.get("cap", 1.0))
        if self.q is not None and self.q.get("kind") == "bumps" and len(self.q["bumps"]) == 1:
            b = self.q["bumps"][0]
            if any(c != 0 for c in b.get("center", [0.0] * self.dim)):
                return None
            mass = b["mass"] if "mass" in b else b["mass_fraction"] * sharp_constant(self.dim)
            sigma = float(b["sigma"])
            return radial_log_potential(self.dim, gaussian_radial_density(self.dim, mass, sigma), 12 * sigma)
        if self.q is not None and self.q.get("kind", "zero") == "zero":
            return RadialProfile(self.dim, lambda r: np.zeros_like(np.asarray(r, float)), "flat")
        return None


# -- validation -------------------------------------------------------------------

_KNOWN = set(Scenario.__dataclass_fields__)


def from_dict(d: dict) -> Scenario:
    d = dict(d)
    unknown = set(d) - _KNOWN - {"builtin"}
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    base = d.pop("builtin", None)
    if base is not None:
        merged = builtin(base).to_dict()
        if {"q", "u", "weight"} & set(d):
            merged.update(q=None, u=None, weight=None)
        merged.update(d)
        d = merged
    if "name" not in d:
        raise ConfigError("scenario needs a name")
    if "balls" in d:
        balls = []
        for b in d["balls"]:
            if isinstance(b, dict):
                balls.append((tuple(b["center"]), float(b["radius"])))
            else:
                balls.append((tuple(b[0]), float(b[1])))
        d["balls"] = balls
    try:
        sc = Scenario(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate(sc)
    return sc


def validate(sc: Scenario) -> None:
    sources = [x is not None for x in (sc.q, sc.u, sc.weight)]
    if sum(sources) != 1:
        raise ConfigError("give exactly one of q, u, weight")
    try:
        grid = sc.grid
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bad = [s for s in sc.stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}")
    for s in sc.stages:
        missing = [dep for dep in STAGE_DEPS[s] if dep not in sc.stages]
        if missing:
            raise ConfigError(f"stage {s!r} needs {missing}")
    if sc.q is not None and sc.q.get("kind", "zero") not in ("zero", "bumps"):
        raise ConfigError(f"unknown q kind {sc.q.get('kind')!r}")
    if sc.u is not None and sc.u.get("kind") not in DIRECT_U:
        raise ConfigError(f"unknown u kind {sc.u.get('kind')!r}")
    if sc.weight is not None and sc.weight.get("kind") not in DIRECT_WEIGHT:
        raise ConfigError(f"unknown weight kind {sc.weight.get('kind')!r}")
    if sc.weight is not None and sc.weight["kind"] == "axis":
        needs_metric = {"geometry", "poincare", "spectral", "covering"} & set(sc.stages)
        if needs_metric:
            raise ConfigError(f"the axis weight vanishes on a hyperplane; stages {sorted(needs_metric)} need ω > 0")
    for c, r in sc.balls:
        if len(c) != sc.dim or not r > 0:
            raise ConfigError(f"bad ball {(c, r)}")
    for a in sc.alphas:
        if not 0 < a < 2:
            raise ConfigError(f"alpha {a} outside (0, 2)")
    for p in sc.ps:
        if not p > 1:
            raise ConfigError(f"p = {p} must exceed 1")
    if sc.functions < 1 or sc.n_balls < 1 or sc.n_pairs < 1:
        raise ConfigError("counts must be positive")
    if grid.dim != sc.dim:  # pragma: no cover
        raise ConfigError("dimension mismatch")


def load(path: str | Path) -> Scenario:
    """Scenario from a TOML file (table ``[scenario]``) or a built-in name."""
    p = Path(path)
    if not p.exists():
        if str(path) in BUILTINS:
            return builtin(str(path))
        raise ConfigError(f"no such config file or built-in scenario: {path}")
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if "scenario" not in data:
        raise ConfigError(f"{p}: missing [scenario] table")
    return from_dict(data["scenario"])


# -- built-in library -------------------------------------------------------------

_BALLS2 = [((0.0, 0.0), 0.5), ((0.6, -0.4), 0.4)]


def _bump(fraction: float, sigma: float = 0.5) -> dict:
    return {"kind": "bumps", "bumps": [{"center": [0.0, 0.0], "mass_fraction": fraction, "sigma": sigma}]}


BUILTINS: dict[str, dict] = {
    "flat2": dict(description="Q = 0 in the plane", q={"kind": "zero"}, balls=_BALLS2),
    "flat4": dict(
        description="Q = 0 in R^4",
        dim=4,
        halfwidth=2.0,
        m=17,
        q={"kind": "zero"},
        balls=[((0.0,) * 4, 0.5)],
        growth_radii=[0.5, 1.0],
        n_balls=40,
        n_pairs=60,
        ball_r_min=0.4,
        functions=4,
        max_sources=128,
        cover_sqrt_t=0.75,
        cover_halfwidth=1.0,
        n_queries=5,
    ),
    "bump25": dict(description="radial bump, total curvature 0.25 c_2", q=_bump(0.25), balls=_BALLS2),
    "bump50": dict(description="radial bump, total curvature 0.5 c_2", q=_bump(0.5), balls=_BALLS2),
    "bump80": dict(description="radial bump, total curvature 0.8 c_2", q=_bump(0.8), balls=_BALLS2),
    "mixed": dict(
        description="positive and negative bumps",
        halfwidth=6.0,
        m=193,
        cover_halfwidth=1.0,
        q={
            "kind": "bumps",
            "bumps": [
                {"center": [-1.5, 0.0], "mass_fraction": 0.5, "sigma": 0.25},
                {"center": [1.5, 0.0], "mass_fraction": -0.3, "sigma": 0.25},
            ],
        },
        balls=_BALLS2,
    ),
    "cylinder": dict(
        description="half cylinder u = -log max(|x|, 1), total curvature c_2",
        u={"kind": "cylinder", "cap": 1.0},
        balls=[((0.0, 0.0), 0.5), ((1.2, 0.0), 0.4)],
    ),
    "quadratic": dict(
        description="non-normal u = x1^2 - x2^2",
        halfwidth=1.0,
        m=129,
        u={"kind": "quadratic"},
        balls=[((0.0, 0.0), 0.2), ((0.2, 0.1), 0.15)],
        growth_radii=[0.2, 0.4],
        max_sources=512,
        stages=["metric", "weights", "geometry", "poincare", "spectral"],
    ),
    "power": dict(
        description="weight |x|^1, u = log|x| / 2",
        weight={"kind": "power", "alpha": 1.0},
        balls=[((0.0, 0.0), 0.5), ((1.0, 0.5), 0.4)],
    ),
    "axis": dict(
        description="weight |x_1|, vanishing on a line",
        weight={"kind": "axis", "alpha": 1.0},
        stages=["metric", "weights"],
    ),
}


def builtin(name: str) -> Scenario:
    if name not in BUILTINS:
        raise ConfigError(f"unknown built-in scenario {name!r}")
    d = copy.deepcopy(BUILTINS[name])
    d["name"] = name
    sc = Scenario(**d)
    validate(sc)
    return sc


def list_scenarios() -> list[tuple[str, int, float, int, str]]:
    rows = []
    for name in BUILTINS:
        sc = builtin(name)
        rows.append((name, sc.dim, sc.halfwidth, sc.m, sc.description))
    return rows


def mass_fraction(sc: Scenario) -> float:
    """``β⁺ / c_n`` for bump scenarios, NaN otherwise."""
    q = sc.qspec()
    if q is None:
        return math.nan
    return q.beta_plus / sharp_constant(sc.dim)
