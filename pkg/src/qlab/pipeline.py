"""Verification pipeline: stages, hard/soft checks, report and artifact assembly."""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .conformal import (
    QSpec,
    log_potential_at,
    measure_from_u,
    normality_fit,
    sharp_constant,
    total_curvatures,
)
from .covering import (
    annuli_oscillation,
    build_cover,
    fit_overlap_constant,
    overlap_count,
    overlap_volume_check,
)
from .geometry import (
    BallEscapesBoxError,
    RadialGeometry,
    end_ratio_radial,
    isoperimetric_ratio,
    path_metric,
    radial_volume_growth,
    volume_growth_table,
)
from .grid import ScalarField, interior_mask
from .poincare import TestFunctionSet, fitted_constant, p_poincare_ratio, strong_p_poincare_ratio, two_poincare_ratio
from .scenarios import Scenario
from .spectral import (
    Theorem1Workspace,
    frac_norm_sq,
    measure_ratio,
    off_diagonal_decay,
    resolvent,
    resolvent_spectral,
    square_function_constant,
    square_function_quadrature,
)
from .weights import hyperplane_pairs, strong_ainfty_ratio, weight_report


@dataclass
class Check:
    name: str
    hard: bool
    passed: bool
    value: float | None = None
    bound: float | None = None
    detail: str = ""

    @property
    def status(self) -> str:
        if self.passed:
            return "pass"
        return "fail" if self.hard else "flag"


@dataclass
class Context:
    scenario: Scenario
    seed: int
    threads: int = 1
    metric: object = None
    omega: ScalarField | None = None
    normal: bool = True
    checks: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def check(self, name, hard, passed, value=None, bound=None, detail=""):
        self.checks.append(Check(name, hard, bool(passed), _num(value), _num(bound), detail))

    def map(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dat(header: str, columns) -> str:
    out = io.StringIO()
    out.write(f"# {header}\n")
    for row in zip(*columns):
        out.write(" ".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


# -- stages -------------------------------------------------------------------


def stage_metric(ctx: Context) -> dict:
    sc = ctx.scenario
    metric, omega = sc.build()
    ctx.metric, ctx.omega = metric, omega
    n = sc.dim
    cn = sharp_constant(n)
    out = {"c_n": cn}
    if metric is None:
        out["metric"] = "none: the weight vanishes on a hyperplane"
        ctx.normal = False
        return out
    q = sc.qspec()
    if q is None:
        meas = measure_from_u(metric)
        band = interior_mask(metric.grid, meas.band)
        q = QSpec.gridded(ScalarField(metric.grid, np.where(band, meas.values, 0.0)))
    beta_p, beta_m = total_curvatures(q)
    out.update(beta_plus=beta_p, beta_minus=beta_m, beta_plus_over_cn=beta_p / cn)
    ctx.check("total curvature below the sharp threshold", False, beta_p < cn * (1 - 1e-3), beta_p / cn, 1.0)
    if sc.q is not None and sc.q.get("kind", "zero") == "zero":
        dev = float(np.max(np.abs(metric.u.values - metric.C)))
        ctx.check("flat: u constant", True, dev <= 1e-8, dev, 1e-8)
    residual, C = normality_fit(metric)
    out.update(normality_residual=residual, normal_constant=C)
    ctx.normal = residual <= sc.normal_tol
    ctx.check("metric is normal", False, ctx.normal, residual, sc.normal_tol,
              "" if ctx.normal else "assumption violated: u is not the log potential of its Q-curvature")
    if not ctx.normal:
        ctx.flags.append("assumption violated: metric is not normal")
    if sc.q is not None and sc.q.get("kind") == "bumps" and n == 2:
        # the dipole and higher moments of off-center bumps decay like 1/r
        centered = all(not any(b.get("center", [0.0] * n)) for b in sc.q["bumps"])
        r0 = 50.0 if centered else 1e4
        radii = np.geomspace(r0, 2 * r0, 9)
        pts = np.zeros((len(radii), n))
        pts[:, 0] = radii
        uu = log_potential_at(sc.qspec(), metric.grid, pts)
        slope = float(np.polyfit(np.log(radii), uu, 1)[0])
        expect = -(beta_p - beta_m) / cn
        out.update(far_field_slope=slope, far_field_expected=expect)
        ctx.check("far-field log law", True, abs(slope - expect) <= 0.01 * max(abs(expect), 1e-12), slope, expect)
    ctx.constants["normality_residual"] = residual
    return out


def stage_weights(ctx: Context) -> dict:
    sc = ctx.scenario
    omega = ctx.omega
    rep = weight_report(omega, ctx.seed, sc.ps, 1.5, sc.n_balls, sc.n_pairs, sc.ball_r_min)
    out = json.loads(rep.to_json())
    for p, val in rep.ap_bounds.items():
        ctx.check(f"A_{p:g} expression >= 1", True, val >= 1 - 1e-12, val, 1.0)
        ctx.constants[f"ap_{p:g}"] = val
    ctx.check("doubling constant >= 1", True, rep.doubling_constant >= 1 - 1e-12, rep.doubling_constant, 1.0)
    ctx.constants["doubling"] = rep.doubling_constant
    ctx.constants["strong_ainf"] = max(rep.strong_ainf["max_delta_over_d"], rep.strong_ainf["max_d_over_delta"])
    ctx.stages["_kappa"] = rep.doubling_exponent
    if sc.weight is not None and sc.weight["kind"] == "axis":
        pairs = hyperplane_pairs(omega.grid, sc.n_pairs, ctx.seed + 2)
        res = strong_ainfty_ratio(omega, pairs, ctx.seed + 2)
        out["hyperplane_pairs"] = res.as_dict()
        ctx.constants["hyperplane_delta_over_d"] = res.max_delta_over_d
    return out


def stage_geometry(ctx: Context) -> dict:
    sc = ctx.scenario
    metric = ctx.metric
    out = {}
    radii = []
    for r in sc.growth_radii:
        try:
            volume_growth_table(metric, (0.0,) * sc.dim, [r])
            radii.append(r)
        except BallEscapesBoxError:
            out.setdefault("skipped_radii", []).append(r)
    if radii:
        table = volume_growth_table(metric, (0.0,) * sc.dim, radii)
        out["growth"] = table.rows
        ctx.artifacts["growth.csv"] = table.to_csv()
        ctx.artifacts["growth.dat"] = _dat("r volume volume/r^n", list(zip(*table.rows)))
        ctx.constants["growth_upper"] = table.upper
        ctx.constants["growth_lower"] = table.lower
    if sc.q is not None and sc.q.get("kind", "zero") == "zero":
        g = metric.grid
        c = g.center_index
        ratios = []
        for k in sorted({2, max(2, c // 4), max(2, c // 2)}):
            region = np.zeros(g.shape, bool)
            region[tuple(slice(c - k, c + k) for _ in range(sc.dim))] = True
            ratios.append(isoperimetric_ratio(metric, region))
        expect = 1 / (2 * sc.dim)
        out["square_isoperimetric"] = ratios
        dev = max(abs(r - expect) for r in ratios)
        ctx.check("isoperimetric ratio of cubes", True, dev <= 1e-12, max(ratios), expect)
    prof = sc.radial_profile()
    if prof is not None:
        geo = RadialGeometry(prof)
        growth = radial_volume_growth(geo, sc.radial_radii)
        out["radial_growth"] = growth.rows
        ctx.artifacts["radial_growth.dat"] = _dat("r volume volume/r^n", list(zip(*growth.rows)))
        R = np.geomspace(10.0, 1e10, 19)
        last, sweep = end_ratio_radial(geo, R)
        q = sc.qspec()
        if q is not None:
            limit = 1 - (q.beta_plus - q.beta_minus) / sharp_constant(sc.dim)
        else:
            limit = 0.0
        out.update(end_ratio=last, end_ratio_limit=limit)
        ctx.artifacts["end_ratio.dat"] = _dat("R end_ratio", [R, sweep])
        ctx.constants["end_ratio"] = last
        ctx.check("end ratio approaches its limit", False, abs(last - limit) <= 0.05, last, limit)
    return out


def stage_poincare(ctx: Context) -> dict:
    sc = ctx.scenario
    omega = ctx.metric.omega
    rows = []

    def one(item):
        bi, ball = item
        fs = TestFunctionSet.generate(sc.dim, sc.functions, ctx.seed + 10 + bi, scale=ball.radius)
        res = []
        for fi, f in enumerate(fs):
            for p in sc.ps:
                res.append((bi, fi, p, p_poincare_ratio(f, omega, ball, p), strong_p_poincare_ratio(f, omega, ball, p)))
        return res

    for chunk in ctx.map(one, enumerate(sc.ball_objects())):
        rows.extend(chunk)
    out = {}
    for p in sc.ps:
        rs = [r[3] for r in rows if r[2] == p]
        ss = [r[4] for r in rows if r[2] == p]
        ctx.check(f"{p:g}-Poincaré ratios finite", True, all(math.isfinite(x) for x in rs), fitted_constant(rs))
        out[f"fitted_{p:g}"] = fitted_constant(rs)
        out[f"fitted_strong_{p:g}"] = fitted_constant(ss)
        ctx.constants[f"poincare_{p:g}"] = fitted_constant(rs)
    ctx.artifacts["poincare.csv"] = "ball,function,p,ratio,strong_ratio\n" + "".join(
        f"{b},{f},{p!r},{r!r},{s!r}\n" for b, f, p, r, s in rows
    )
    return out


def stage_spectral(ctx: Context) -> dict:
    sc = ctx.scenario
    metric = ctx.metric

    def one(item):
        bi, ball = item
        ws = Theorem1Workspace(metric, ball, sc.max_sources, ctx.seed + 20 + bi)
        op, dec = ws.op, ws.dec
        fs = TestFunctionSet.generate(sc.dim, sc.functions, ctx.seed + 10 + bi, scale=ball.radius)
        F = np.stack([op.restrict(f.field(metric.grid)) for f in fs], axis=1)
        G = np.stack([op.restrict(f.grad_norm(metric.grid)) for f in fs], axis=1)
        res = {"ball": bi, "nodes": op.size, "lambda_1": float(dec.eigenvalues[1])}
        K = op.stiffness
        scale = float(abs(K).max())
        res["symmetry"] = float(abs(K - K.T).max()) / scale
        res["constant_kernel"] = float(np.abs(K @ np.ones(op.size)).max()) / scale
        gram = dec.vectors.T @ (dec.vectors * op.mass[:, None])
        res["orthonormality"] = float(np.abs(gram - np.eye(dec.count)).max())
        res["eig_residual"] = dec.residual / max(1.0, float(dec.eigenvalues[-1]))
        sf = []
        for a in sc.alphas:
            Ka = square_function_constant(a)
            for j in range(F.shape[1]):
                quad = square_function_quadrature(dec, F[:, j], a)
                sf.append(abs(quad / frac_norm_sq(dec, a / 4, F[:, j]) / Ka - 1))
        res["square_function_error"] = max(sf)
        f0 = F[:, 0]
        worst = 0.0
        contraction = True
        for t in (1e-3, 1e-1, 10.0):
            x, _ = resolvent(op, t, f0)
            x2, _ = resolvent_spectral(dec, t, f0)
            worst = max(worst, op.norm(x - x2) / op.norm(f0))
            contraction &= op.norm(x) <= op.norm(f0) * (1 + 1e-12)
        res["resolvent_agreement"] = worst
        res["resolvent_contraction"] = bool(contraction)
        chain = measure_ratio(op, dec, f0)
        direct = two_poincare_ratio(fs.functions[0], metric.omega, ball, energy="form")
        res["measure_chain_gap"] = abs(chain - direct) / max(abs(direct), 1e-300)
        t1 = []
        for a in sc.alphas:
            for j, r in enumerate(ws.evaluate(F, a, G)):
                t1.append((bi, j, a, r.lhs, r.mid, r.rhs, r.excluded_bound))
        res["theorem1"] = t1
        # off-diagonal decay between the left and right parts of 2B
        c1 = ball.center[0]
        x1 = metric.grid.points()[op.nodes, 0] - c1
        E = x1 < -ball.radius
        Fm = x1 > 0.5 * ball.radius
        fE = np.where(E, 1.0, 0.0)
        dE = path_metric(metric).from_set(op.nodes[E])
        d = float(dE[op.nodes[Fm]].min())
        ts = (d / np.linspace(2.0, 10.0, 9)) ** 2
        fit = off_diagonal_decay(op, E, Fm, fE, ts, distance=d)
        res["decay"] = {"slope": fit.slope, "r2": fit.r2, "distance": d,
                        "x": (d / np.sqrt(ts)).tolist(), "value": (fit.values / fit.f_norm).tolist()}
        return res

    results = ctx.map(one, enumerate(sc.ball_objects()))
    hard = [
        ("operator symmetric", "symmetry", 1e-12),
        ("constants in the kernel", "constant_kernel", 1e-12),
        ("eigenvectors orthonormal", "orthonormality", 1e-8),
        ("eigen-residual", "eig_residual", 1e-8),
        ("square-function identity", "square_function_error", 1e-6),
        ("resolvent routes agree", "resolvent_agreement", 1e-8),
        ("measure chain equals 2-Poincaré ratio", "measure_chain_gap", 1e-10),
    ]
    for label, key, tol in hard:
        worst = max(r[key] for r in results)
        ctx.check(label, True, worst <= tol, worst, tol)
    ctx.check("resolvent contraction", True, all(r["resolvent_contraction"] for r in results))
    rows = [row for r in results for row in r["theorem1"]]
    finite = all(math.isfinite(v) for row in rows for v in row[3:6])
    ctx.check("fractional Poincaré quantities finite", True, finite)
    out = {"balls": [{k: v for k, v in r.items() if k != "theorem1"} for r in results]}
    for a in sc.alphas:
        sel = [row for row in rows if row[2] == a]
        lm = fitted_constant(l / m if m > 0 else (0.0 if l == 0 else math.inf) for _, _, _, l, m, _, _ in sel)
        mr = fitted_constant(m / r if r > 0 else (0.0 if m == 0 else math.inf) for _, _, _, _, m, r, _ in sel)
        lr = fitted_constant(l / r if r > 0 else (0.0 if l == 0 else math.inf) for _, _, _, l, _, r, _ in sel)
        out[f"alpha_{a:g}"] = {"lhs_over_mid": lm, "mid_over_rhs": mr, "lhs_over_rhs": lr}
        ctx.constants[f"theorem1_lhs_over_rhs_{a:g}"] = lr
        ctx.constants[f"theorem1_mid_over_rhs_{a:g}"] = mr
    if not ctx.normal:
        out["flag"] = "assumption violated: metric is not normal; fractional-Poincaré constants are not covered"
    for r in results:
        dec = r["decay"]
        ok = dec["slope"] < 0 and dec["r2"] >= 0.9
        ctx.check(f"off-diagonal decay (ball {r['ball']})", False, ok, dec["slope"], 0.0, f"R2 = {dec['r2']:.4f}")
    ctx.artifacts["theorem1.csv"] = "ball,function,alpha,lhs,mid,rhs,excluded_bound\n" + "".join(
        ",".join(repr(float(v)) if i >= 2 else str(v) for i, v in enumerate(row)) + "\n" for row in rows
    )
    ctx.artifacts["decay.dat"] = "".join(
        _dat(f"ball {r['ball']}: d/sqrt(t) value/|f|", [r["decay"]["x"], r["decay"]["value"]]) + "\n\n"
        for r in results
    )
    return out


def stage_covering(ctx: Context) -> dict:
    sc = ctx.scenario
    metric = ctx.metric
    g = metric.grid
    half = sc.cover_halfwidth if sc.cover_halfwidth is not None else g.halfwidth / 2
    domain = np.all(np.abs(g.points()) <= half + 1e-12, axis=1).reshape(g.shape)
    emax = float(metric.length_density[domain].max())
    s = sc.cover_sqrt_t if sc.cover_sqrt_t is not None else max(0.25, 3.15 * g.h * emax)
    t = s**2
    cover = build_cover(metric, domain, t)
    ctx.check("cover disjointness", True, cover.disjoint)
    ctx.check("cover coverage", True, cover.covering)
    ctx.artifacts["cover.json"] = cover.to_json()
    kappa = ctx.stages.get("_kappa", float(sc.dim))
    rng = np.random.default_rng(ctx.seed + 30)
    queries = rng.uniform(-half, half, (sc.n_queries, sc.dim))
    counts = {th: [] for th in (2, 4, 8)}
    vol_ok = True
    skipped = 0
    for x in queries:
        for th in counts:
            counts[th].append(overlap_count(cover, metric, x, th))
            try:
                chk = overlap_volume_check(cover, metric, x, th)
            except BallEscapesBoxError:
                skipped += 1
                continue
            vol_ok &= chk.holds and chk.count == counts[th][-1]
    ctx.check("overlap volume route", True, vol_ok)
    out = {"t": t, "centers": cover.count, "queries": len(queries), "volume_checks_skipped": skipped, "kappa": kappa}
    if counts[2]:
        Ct = fit_overlap_constant(counts[2], kappa)
        worst = max(max(c) / (Ct * th ** (2 * kappa)) for th, c in counts.items())
        out.update(C_tilde=Ct, max_counts={str(th): max(c) for th, c in counts.items()}, worst_fraction=worst)
        ctx.check("overlap count polynomial bound", False, worst <= 1 + 1e-12, worst, 1.0)
        ctx.constants["overlap_C_tilde"] = Ct
        ctx.artifacts["overlap.csv"] = "theta,count\n" + "".join(f"{th},{c}\n" for th, cs in counts.items() for c in cs)
    j = int(np.argmin(np.linalg.norm(g.points()[cover.centers], axis=1)))
    fs = TestFunctionSet.generate(sc.dim, sc.functions, ctx.seed + 40, scale=1.0)
    rows = []
    for fi, f in enumerate(fs):
        for k in range(3):
            try:
                r = annuli_oscillation(cover, metric, f, j, k)
            except BallEscapesBoxError:
                break
            rows.append((fi, k, r.lhs, r.rhs, r.ratio, r.doubling_slack))
    if rows:
        out["annuli_max_ratio"] = max(r[4] for r in rows)
        out["annuli_doubling_slack"] = rows[0][5]
        ctx.constants["annuli_ratio"] = out["annuli_max_ratio"]
        ctx.artifacts["annuli.csv"] = "function,k,lhs,rhs,ratio,doubling_slack\n" + "".join(
            ",".join(str(v) if i < 2 else repr(float(v)) for i, v in enumerate(row)) + "\n" for row in rows
        )
    return out


STAGE_FUNCS = {
    "metric": stage_metric,
    "weights": stage_weights,
    "geometry": stage_geometry,
    "poincare": stage_poincare,
    "spectral": stage_spectral,
    "covering": stage_covering,
}


@dataclass
class VerificationReport:
    data: dict
    artifacts: dict

    @property
    def hard_failures(self) -> list:
        return [c for c in self.data["checks"] if c["hard"] and not c["passed"]]

    @property
    def soft_flags(self) -> list:
        return [c for c in self.data["checks"] if not c["hard"] and not c["passed"]]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def run_scenario(sc: Scenario, seed: int | None = None, threads: int = 1) -> VerificationReport:
    seed = sc.seed if seed is None else int(seed)
    ctx = Context(sc, seed, max(1, int(threads)))
    for name in sc.stage_order():
        ctx.stages[name] = STAGE_FUNCS[name](ctx)
    ctx.stages.pop("_kappa", None)
    g = sc.grid
    data = {
        "tool": "qlab",
        "version": __version__,
        "scenario": sc.name,
        "config": sc.to_dict(),
        "config_hash": sc.config_hash(),
        "seeds": {"base": seed, "config": sc.seed},
        "grid": {"dim": g.dim, "halfwidth": g.halfwidth, "m": g.m, "h": g.h},
        "summation_order": "fixed",
        "stages": ctx.stages,
        "checks": [dict(asdict(c), status=c.status) for c in ctx.checks],
        "constants": ctx.constants,
        "flags": ctx.flags,
    }
    data = _clean(data)
    return VerificationReport(data, ctx.artifacts)


def diff_reports(a: dict, b: dict, rtol: float = 0.2) -> list[tuple[str, object, object, str]]:
    """Fitted constants that differ beyond ``rtol`` plus check-status changes."""
    rows = []
    ca, cb = a.get("constants", {}), b.get("constants", {})
    for key in sorted(set(ca) | set(cb)):
        va, vb = ca.get(key), cb.get(key)
        if va is None or vb is None:
            rows.append((key, va, vb, "missing"))
            continue
        if isinstance(va, str) or isinstance(vb, str):
            if va != vb:
                rows.append((key, va, vb, "changed"))
            continue
        scale = max(abs(va), abs(vb))
        if scale > 0 and abs(va - vb) > rtol * scale:
            rows.append((key, va, vb, f"rel {abs(va - vb) / scale:.3g} > {rtol:g}"))
    sa = {c["name"]: c["status"] for c in a.get("checks", [])}
    sb = {c["name"]: c["status"] for c in b.get("checks", [])}
    for key in sorted(set(sa) | set(sb)):
        if sa.get(key) != sb.get(key):
            rows.append((f"check: {key}", sa.get(key), sb.get(key), "status"))
    return rows
