import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlab.conformal import ConformalMetric, QSpec, log_potential_u, sharp_constant
from qlab.geometry import path_metric
from qlab.grid import Ball, build_grid
from qlab.poincare import TestFunctionSet, coordinate, two_poincare_ratio
from qlab.spectral import (
    Theorem1Workspace,
    assemble,
    eig,
    frac_apply,
    frac_norm_sq,
    measure_ratio,
    off_diagonal_decay,
    resolvent,
    resolvent_spectral,
    square_function,
    square_function_constant,
    square_function_quadrature,
    theorem1_check,
)
from qlab.weights import BallOutsideBoxError

BALL = Ball((0.0, 0.0), 0.5)


@pytest.fixture(scope="module")
def small():
    g = build_grid(2, 1.0, 33)
    met = ConformalMetric.from_u(g, 0.3 * np.sin(g.mesh()[0]) * np.cos(g.mesh()[1]))
    op = assemble(met, BALL)
    return met, op, eig(op)


@pytest.fixture(scope="module")
def ws(flat2):
    return Theorem1Workspace(flat2, BALL)


def test_operator_is_self_adjoint(small):
    _, op, _ = small
    K = op.stiffness.toarray()
    np.testing.assert_allclose(K, K.T, atol=0)
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=(2, op.size))
    assert op.inner(op.apply(f), g) == pytest.approx(op.inner(f, op.apply(g)), rel=1e-10)
    assert op.form(f) > 0


def test_constants_in_kernel(small):
    _, op, dec = small
    np.testing.assert_allclose(op.apply(np.ones(op.size)), 0, atol=1e-12)
    assert dec.eigenvalues[0] == 0 and dec.eigenvalues[1] > 0
    assert np.ptp(dec.vectors[:, 0]) == 0


def test_eigenvectors_are_orthonormal(small):
    _, op, dec = small
    G = dec.vectors.T @ (op.mass[:, None] * dec.vectors)
    np.testing.assert_allclose(G, np.eye(op.size), atol=1e-9)
    assert dec.residual < 1e-8 and dec.complete


def test_sparse_path_matches_dense(small, monkeypatch):
    import qlab.spectral as spectral

    _, op, dense = small
    monkeypatch.setattr(spectral, "DENSE_LIMIT", 10)
    part = spectral.eig(op, k=8)
    assert not part.complete
    np.testing.assert_allclose(part.eigenvalues, dense.eigenvalues[:8], rtol=1e-7, atol=1e-10)


def test_frac_first_power_is_the_operator(small):
    _, op, dec = small
    f = np.random.default_rng(1).normal(size=op.size)
    np.testing.assert_allclose(frac_apply(dec, 1.0, f).values, op.apply(f), rtol=1e-7, atol=1e-7 * np.abs(op.apply(f)).max())


def test_semigroup(small):
    _, op, dec = small
    f = np.random.default_rng(2).normal(size=op.size)
    a = frac_apply(dec, 0.3, frac_apply(dec, 0.45, f).values).values
    np.testing.assert_allclose(a, frac_apply(dec, 0.75, f).values, atol=1e-9 * np.abs(a).max())


def test_single_eigenvector(small):
    _, op, dec = small
    v = dec.vectors[:, 3]
    lam = dec.eigenvalues[3]
    assert frac_norm_sq(dec, 0.25, v) == pytest.approx(math.sqrt(lam), rel=1e-9)
    # K_1 = Γ(3/2) Γ(1/2) = π/2
    assert square_function(dec, v, 1.0) == pytest.approx(math.pi / 2 * math.sqrt(lam), rel=1e-9)


def test_square_function_constant_small_alpha():
    for a in (1e-2, 1e-4):
        assert square_function_constant(a) * a / 2 == pytest.approx(1.0, abs=2 * a)
    with pytest.raises(ValueError):
        square_function_constant(2.0)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 1.7])
def test_square_function_quadrature_matches_closed_form(small, alpha):
    _, op, dec = small
    f = np.random.default_rng(3).normal(size=op.size)
    assert square_function_quadrature(dec, f, alpha) == pytest.approx(square_function(dec, f, alpha), rel=1e-8)


def test_resolvent_of_constant(small):
    _, op, _ = small
    x, y = resolvent(op, 0.7, np.ones(op.size))
    np.testing.assert_allclose(x, 1.0, rtol=1e-10)
    np.testing.assert_allclose(y, 0.0, atol=1e-10)


def test_resolvent_of_eigenvector(small):
    _, op, dec = small
    v, lam, t = dec.vectors[:, 5], dec.eigenvalues[5], 0.2
    x, y = resolvent(op, t, v)
    np.testing.assert_allclose(x, v / (1 + t * lam), atol=1e-10 * np.abs(v).max())
    np.testing.assert_allclose(y, v * t * lam / (1 + t * lam), atol=1e-10 * np.abs(v).max())


def test_resolvent_routes_agree(small):
    _, op, dec = small
    f = np.random.default_rng(4).normal(size=op.size)
    for t in (1e-3, 0.1, 10.0):
        a, b = resolvent(op, t, f), resolvent_spectral(dec, t, f)
        np.testing.assert_allclose(a[0], b[0], atol=1e-9)
        np.testing.assert_allclose(a[1], b[1], atol=1e-9)
        assert op.norm(a[0]) <= op.norm(f) * (1 + 1e-12)


@pytest.mark.parametrize("n,m", [(2, 17), (4, 9)])
def test_constant_conformal_factor_scales_eigenvalues(n, m):
    # ω = e^{nC}: K picks up e^{(n-2)C}, M picks up e^{nC}
    g = build_grid(n, 1.0, m)
    b = Ball((0.0,) * n, 0.45)
    base = eig(assemble(ConformalMetric.from_u(g, np.zeros(g.shape)), b)).eigenvalues
    C = 0.7
    sc = eig(assemble(ConformalMetric.from_u(g, np.full(g.shape, C)), b)).eigenvalues
    np.testing.assert_allclose(sc, base * math.exp(-2 * C), rtol=1e-9, atol=1e-12)


def test_four_dimensional_bump_operator():
    g = build_grid(4, 1.0, 21)
    met = log_potential_u(QSpec.bumps(4, [((0.0,) * 4, 0.5 * sharp_constant(4), 0.35)]), g)
    op = assemble(met, Ball((0.0,) * 4, 0.25))
    dec = eig(op, k=10)
    assert dec.eigenvalues[0] == 0 and dec.eigenvalues[1] > 0
    assert dec.residual < 1e-8


def test_measure_chain(flat2):
    op = assemble(flat2, BALL)
    dec = eig(op)
    f = coordinate(2)
    F = op.restrict(f.field(flat2.grid))
    assert op.form(F) == pytest.approx(frac_norm_sq(dec, 0.5, F), rel=1e-9)
    assert measure_ratio(op, dec, F) == pytest.approx(two_poincare_ratio(f, flat2.omega, BALL, energy="form"), rel=1e-10)


def test_degenerate_or_escaping_ball(flat2):
    with pytest.raises(BallOutsideBoxError):
        assemble(flat2, Ball((1.5, 0.0), 0.5))


def test_theorem1_constant_function(ws):
    r = ws.evaluate(np.full(ws.op.size, 2.5), 1.0)[0]
    assert abs(r.lhs) < 1e-20 and abs(r.mid) < 1e-20 and abs(r.rhs) < 1e-20
    assert r.lhs_over_rhs == 0.0 or r.lhs_over_rhs < 1e-6


def test_theorem1_row_identity_matches_brute_force(ws):
    F = ws.op.restrict(TestFunctionSet.generate(2, 1, seed=2).functions[0].field(ws.op.grid))
    K = ws.kernel(1.2)
    brute = float(np.sum(K * (F[:, None] - F[None, :]) ** 2))
    assert ws.rhs(F[:, None], 1.2)[0] == pytest.approx(brute, rel=1e-10)


@given(lam=st.floats(0.1, 10), shift=st.floats(-5, 5), alpha=st.sampled_from([0.5, 1.0, 1.5]))
def test_theorem1_invariance(ws, lam, shift, alpha):
    F = ws.op.restrict(TestFunctionSet.generate(2, 2, seed=7).functions[1].field(ws.op.grid))
    a = ws.evaluate(F, alpha)[0]
    b = ws.evaluate(lam * F + shift, alpha)[0]
    assert b.lhs_over_mid == pytest.approx(a.lhs_over_mid, rel=1e-6)
    assert b.mid_over_rhs == pytest.approx(a.mid_over_rhs, rel=1e-6)


def test_theorem1_check_wrapper(flat2, ws):
    f = coordinate(2)
    r = theorem1_check(flat2, BALL, f, 1.0, workspace=ws)
    assert r.lhs > 0 and r.mid > 0 and r.rhs > 0 and r.excluded_bound > 0


def test_stratified_sources_match_full(flat2, ws):
    part = Theorem1Workspace(flat2, BALL, max_sources=200, seed=1)
    assert not part.exact and ws.exact
    fns = TestFunctionSet.generate(2, 4, seed=3)
    F = np.column_stack([ws.op.restrict(f.field(flat2.grid)) for f in fns])
    full, est = ws.rhs(F, 1.0), part.rhs(F, 1.0)
    np.testing.assert_allclose(est, full, rtol=0.05)


def test_off_diagonal_decay(bump2):
    op = assemble(bump2, BALL)
    x1 = bump2.grid.points()[op.nodes][:, 0]
    E, F = x1 < -0.5, x1 > 0.25
    f = np.where(E, 1.0, 0.0)
    d = float(path_metric(bump2).from_set(op.nodes[E])[op.nodes[F]].min())
    ts = (d / np.linspace(2, 10, 9)) ** 2
    fit = off_diagonal_decay(op, E, F, f, ts, path=path_metric(bump2))
    assert fit.distance == d
    assert fit.slope < 0 and fit.r2 > 0.9
    assert fit.values[-1] / fit.f_norm < 1e-3


def test_off_diagonal_requires_support():
    g = build_grid(2, 1.0, 17)
    op = assemble(ConformalMetric.from_u(g, np.zeros(g.shape)), Ball((0.0, 0.0), 0.4))
    E = np.zeros(op.size, bool)
    with pytest.raises(ValueError):
        off_diagonal_decay(op, E, ~E, np.ones(op.size), [1.0], distance=1.0)
