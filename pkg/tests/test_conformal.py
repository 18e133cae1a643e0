import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate as spi

from qlab.conformal import (
    ConformalMetric,
    NonIntegrableError,
    QSpec,
    UnresolvedScaleError,
    cylinder_profile,
    gaussian_radial_density,
    log_potential_at,
    log_potential_u,
    measure_from_u,
    normality_fit,
    normality_residual,
    q_from_u,
    radial_log_potential,
    sharp_constant,
    total_curvatures,
)
from qlab.grid import ScalarField, build_grid, integrate


def test_sharp_constants():
    assert sharp_constant(2) == pytest.approx(math.pi, abs=1e-14)
    assert sharp_constant(4) == pytest.approx(4 * math.pi**2, abs=1e-12)
    with pytest.raises(ValueError):
        sharp_constant(3)


def test_zero_q_gives_constant_u():
    g = build_grid(2, 1.0, 33)
    met = log_potential_u(QSpec.zero(2), g, C=0.7)
    np.testing.assert_allclose(met.u.values, 0.7, atol=1e-12)
    np.testing.assert_allclose(met.omega.values, math.exp(1.4))


def test_bump_grid_matches_radial_quadrature(bump2):
    # oracle: independent 1D quadrature of the log kernel spherical mean
    mass = 0.5 * math.pi
    prof = radial_log_potential(2, gaussian_radial_density(2, mass, 0.3), 12 * 0.3)
    g = bump2.grid
    r = g.radius()
    inside = r <= 1.5
    err = np.abs(bump2.u.values - prof.u(r))[inside].max()
    assert err < 3e-3


def test_radial_route_against_direct_2d_quadrature():
    rho = gaussian_radial_density(2, 1.3, 0.4)
    prof = radial_log_potential(2, rho, 5.0)
    R = 0.7

    def integrand(s, t):
        d = math.hypot(R - s * math.cos(t), s * math.sin(t))
        return math.log(s / d) * float(rho(s)) * s

    val, _ = spi.dblquad(integrand, 0, 2 * math.pi, 1e-9, 5.0, epsabs=1e-10)
    assert float(prof.u(R)) == pytest.approx(val / math.pi, abs=1e-6)


def test_far_field_slope():
    g = build_grid(2, 2.0, 65)
    beta = 0.4 * math.pi
    q = QSpec.bumps(2, [((0.0, 0.0), beta, 0.3)])
    r = np.geomspace(50, 100, 7)
    pts = np.stack([r, np.zeros_like(r)], axis=1)
    slope = np.polyfit(np.log(r), log_potential_at(q, g, pts), 1)[0]
    assert slope == pytest.approx(-beta / math.pi, rel=1e-3)


def test_q_from_u_recovers_bump_density(bump2):
    q = q_from_u(bump2)
    meas = q.values * bump2.omega.values
    total = integrate(ScalarField(bump2.grid, meas))
    assert total == pytest.approx(0.5 * math.pi, rel=2e-2)


def test_measure_from_u_of_log_potential_is_density():
    g = build_grid(2, 2.0, 129)
    q = QSpec.bumps(2, [((0.2, -0.1), 1.0, 0.3)])
    met = log_potential_u(q, g)
    meas = measure_from_u(met)
    dens = q.density(g).values
    sl = meas.interior()
    assert np.abs(meas.values[sl] - dens[sl]).max() < 0.02 * dens.max()


def test_quadratic_is_maximally_non_normal():
    L = 1.0
    g = build_grid(2, L, 129)
    met = ConformalMetric.from_u(g, lambda x, y: x**2 - y**2)
    res, C = normality_fit(met)
    assert res == pytest.approx(2 * L**2, rel=0.05)
    assert normality_residual(met) == res


def test_normal_metric_has_small_residual(bump2):
    assert normality_residual(bump2) < 0.02


def test_totals_of_separated_bumps():
    q = QSpec.bumps(2, [((-2.0, 0.0), 1.0, 0.1), ((2.0, 0.0), -0.5, 0.1)])
    assert total_curvatures(q) == (1.0, 0.5)


def test_overlapping_opposite_bumps_raise():
    q = QSpec.bumps(2, [((0.0, 0.0), 1.0, 0.5), ((0.5, 0.0), -0.5, 0.5)])
    with pytest.raises(NonIntegrableError):
        total_curvatures(q)


def test_gridded_totals_split_signs():
    g = build_grid(2, 1.0, 65)
    f = ScalarField.from_function(g, lambda x, y: np.sin(np.pi * x))
    q = QSpec.gridded(f)
    bp, bm = total_curvatures(q)
    assert bp == pytest.approx(bm, rel=1e-10)
    assert bp == pytest.approx(4 / math.pi, rel=1e-3)


def test_coarse_grid_rejects_narrow_bump():
    g = build_grid(2, 1.0, 9)
    with pytest.raises(UnresolvedScaleError):
        log_potential_u(QSpec.bumps(2, [((0.0, 0.0), 1.0, 0.1)]), g)


def test_supercritical_mass_warns():
    g = build_grid(2, 2.0, 33)
    with pytest.warns(UserWarning):
        log_potential_u(QSpec.bumps(2, [((0.0, 0.0), 1.2 * math.pi, 0.4)]), g)


def test_radial_profile_support_checked():
    g = build_grid(2, 1.0, 9)
    q = QSpec.radial(2, lambda r: np.ones_like(r), 2.0)
    with pytest.raises(NonIntegrableError):
        q.density(g)


def test_radial_totals_by_quadrature():
    q = QSpec.radial(2, lambda r: np.ones_like(np.asarray(r, float)), 1.0)
    assert q.beta_plus == pytest.approx(math.pi)
    assert q.beta_minus == 0.0


def test_cylinder_profile():
    prof = cylinder_profile()
    assert float(prof.u(0.5)) == 0.0
    assert float(prof.u(math.e)) == pytest.approx(-1.0)


def test_four_dimensional_radial_route_far_field():
    mass = 0.5 * sharp_constant(4)
    prof = radial_log_potential(4, gaussian_radial_density(4, mass, 0.5), 6.0)
    r = np.array([50.0, 100.0])
    slope = np.diff(prof.u(r)) / np.diff(np.log(r))
    # the R^4 kernel mean adds -<s^2>/(4 R^2) c_4^{-1} per unit mass, an O(1e-3) slope change here
    assert slope[0] == pytest.approx(-0.5, rel=2e-3)


def test_four_dimensional_second_moment_correction():
    mass, sigma = 0.5 * sharp_constant(4), 0.5
    prof = radial_log_potential(4, gaussian_radial_density(4, mass, sigma), 8.0)
    R = np.array([40.0, 80.0])
    # for R beyond the support: u = (mass log R ... ) reduces to -(mass/c) log R - mass <s^2> / (4 c R^2) + const,
    # with <s^2> = 4 sigma^2 for the 4D Gaussian
    du = prof.u(R[1]) - prof.u(R[0])
    expect = -0.5 * math.log(2) - mass * 4 * sigma**2 / (4 * sharp_constant(4)) * (1 / R[1] ** 2 - 1 / R[0] ** 2)
    assert du == pytest.approx(expect, abs=1e-9)


@given(C=st.floats(-3, 3), shift=st.floats(-2, 2))
def test_normality_ignores_additive_constants(C, shift):
    g = build_grid(2, 1.0, 33)
    met = ConformalMetric.from_u(g, lambda x, y: x**2 - y**2, C=C)
    res, c0 = normality_fit(met)
    res2, c1 = normality_fit(met.shifted(shift))
    assert res2 == pytest.approx(res, abs=1e-9)
    assert c1 - c0 == pytest.approx(shift, abs=1e-9)


@given(mass=st.floats(0.01, 2.0), sigma=st.floats(0.2, 0.5))
def test_bump_total_matches_grid_sum(mass, sigma):
    g = build_grid(2, 4.0, 129)
    q = QSpec.bumps(2, [((0.0, 0.0), mass, sigma)])
    assert integrate(q.density(g)) == pytest.approx(q.beta_plus, rel=1e-6)
