import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlab.conformal import ConformalMetric, RadialProfile, cylinder_profile, gaussian_radial_density, radial_log_potential
from qlab.geometry import (
    BallEscapesBoxError,
    RadialGeometry,
    end_ratio_radial,
    geodesic_ball,
    geodesic_distance,
    isoperimetric_ratio,
    radial_volume_growth,
    volume_growth_table,
)
from qlab.grid import build_grid


@pytest.fixture(scope="module")
def flat_fine():
    g = build_grid(2, 1.5, 193)  # h = 1/64
    return ConformalMetric.from_u(g, np.zeros(g.shape))


def test_flat_unit_geodesic_ball(flat_fine):
    b = geodesic_ball(flat_fine, (0.0, 0.0), 1.0)
    assert b.volume == pytest.approx(math.pi, rel=0.02)


def test_monte_carlo_volume(flat_fine):
    b = geodesic_ball(flat_fine, (0.0, 0.0), 1.0, volume="mc", seed=3)
    assert b.volume == pytest.approx(math.pi, rel=0.02)


def test_ball_escaping_box_raises(flat2):
    with pytest.raises(BallEscapesBoxError):
        geodesic_ball(flat2, (0.0, 0.0), 1.99)


def test_constant_factor_scales_distance(flat2):
    shifted = flat2.shifted(math.log(3.0))
    d0 = geodesic_distance(flat2, (-1.0, 0.0), (1.0, 0.5))
    assert geodesic_distance(shifted, (-1.0, 0.0), (1.0, 0.5)) == pytest.approx(3 * d0, rel=1e-12)


@pytest.mark.parametrize("k", [2, 5, 9])
def test_square_isoperimetric_ratio(flat2, k):
    g = flat2.grid
    c = g.center_index
    region = np.zeros(g.shape, bool)
    region[c - k : c + k, c - k : c + 3] = True
    ratio = isoperimetric_ratio(flat2, region)
    side_a, side_b = 2 * k, k + 3
    assert ratio == pytest.approx(math.sqrt(side_a * side_b) / (2 * (side_a + side_b)), abs=1e-14)
    sq = np.zeros(g.shape, bool)
    sq[c - k : c + k, c - k : c + k] = True
    assert isoperimetric_ratio(flat2, sq) == 0.25


@given(C=st.floats(-2, 2))
def test_isoperimetric_ratio_is_conformally_invariant_for_constants(C):
    g = build_grid(2, 1.0, 17)
    met = ConformalMetric.from_u(g, np.full(g.shape, C))
    sq = np.zeros(g.shape, bool)
    sq[4:10, 4:10] = True
    assert isoperimetric_ratio(met, sq) == pytest.approx(0.25, rel=1e-12)


def test_growth_table(flat2):
    t = volume_growth_table(flat2, (0.0, 0.0), [0.5, 1.0])
    assert t.lower > 0.97 * math.pi and t.upper < 1.03 * math.pi
    assert t.to_csv().startswith("r,volume,ratio")


def test_cylinder_ray_distance_and_volume():
    # oracle: for u = -log max(r, 1), ρ(R) = 1 + log R and Vol = π + 2π log R beyond the cap
    geo = RadialGeometry(cylinder_profile())
    assert geo.ray_distance(0.0, 3.0) == pytest.approx(1 + math.log(3.0), rel=1e-5)
    assert geo.ball_volume(20.0) == pytest.approx(math.pi + 2 * math.pi * 19.0, rel=1e-4)
    tab = radial_volume_growth(geo, [1.0, 20.0])
    assert tab.rows[0][2] / tab.rows[1][2] > 5


def test_cylinder_end_ratio_tends_to_zero():
    geo = RadialGeometry(cylinder_profile())
    R = np.geomspace(10, 1e10, 10)
    last, sweep = end_ratio_radial(geo, R)
    np.testing.assert_allclose(sweep, 1 / (1 + 2 * np.log(R)), rtol=1e-4)
    assert np.all(np.diff(sweep) < 0) and last < 0.03


@pytest.mark.parametrize("n,frac", [(2, 0.5), (4, 0.5), (2, 0.25)])
def test_bump_end_ratio_limit(n, frac):
    from qlab.conformal import sharp_constant

    mass = frac * sharp_constant(n)
    prof = radial_log_potential(n, gaussian_radial_density(n, mass, 0.5), 6.0)
    geo = RadialGeometry(prof)
    last, _ = end_ratio_radial(geo, np.geomspace(1e3, 1e10, 5))
    assert last == pytest.approx(1 - frac, abs=2e-3)


def test_flat_radial_geometry():
    geo = RadialGeometry(RadialProfile(4, lambda r: np.zeros_like(np.asarray(r, float))))
    assert geo.ball_volume(2.0) == pytest.approx(math.pi**2 / 2 * 16, rel=1e-4)
    last, _ = end_ratio_radial(geo, [1.0, 10.0])
    assert last == pytest.approx(1.0, rel=1e-4)


def test_end_ratio_requires_increasing_radii():
    geo = RadialGeometry(cylinder_profile())
    with pytest.raises(ValueError):
        end_ratio_radial(geo, [2.0, 1.0])
