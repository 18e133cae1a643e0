import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlab.conformal import ConformalMetric, UnresolvedScaleError
from qlab.covering import (
    VitaliCover,
    annuli_double_sum,
    annuli_oscillation,
    build_cover,
    certify,
    fit_overlap_constant,
    overlap_count,
    overlap_volume_check,
)
from qlab.geometry import BallEscapesBoxError
from qlab.grid import build_grid
from qlab.poincare import TestFunctionSet


def _central(grid, half):
    return np.all(np.abs(np.stack(grid.mesh(), -1)) <= half + 1e-12, axis=-1)


@pytest.fixture(scope="module")
def flat_cover(flat2):
    return build_cover(flat2, _central(flat2.grid, 1.9), 0.2**2)


@pytest.fixture(scope="module")
def small_cover(bump2):
    dom = _central(bump2.grid, 1.9)
    return build_cover(bump2, dom, 0.2**2)


def _nearest_origin(cover, metric):
    pts = metric.grid.points()[cover.centers]
    return int(np.argmin(np.linalg.norm(pts, axis=1)))


def test_flat_center_count(flat2):
    cov = build_cover(flat2, np.ones(flat2.grid.shape, bool), 1.0)
    L = flat2.grid.halfwidth
    # doubles cover the box; disjoint unit balls sit in the box widened by 1
    assert (2 * L) ** 2 / (4 * math.pi) <= cov.count <= (2 * L + 2) ** 2 / math.pi
    assert cov.disjoint and cov.covering


def test_line_domain_packs_at_grid_spacing(flat2):
    g = flat2.grid
    dom = np.zeros(g.shape, bool)
    dom[:, g.center_index] = True
    sqrt_t = 0.3
    cov = build_cover(flat2, dom, sqrt_t**2)
    x = g.points()[cov.centers][:, 0]
    # greedy 1D packing: next center at the first node strictly beyond 2√t
    step = (math.floor(2 * sqrt_t / g.h + 1e-9) + 1) * g.h
    np.testing.assert_allclose(x, -g.halfwidth + step * np.arange(len(x)), atol=1e-12)
    assert x[-1] + step > g.halfwidth


def test_certificates_detect_broken_covers(small_cover, bump2):
    assert small_cover.disjoint and small_cover.covering
    dropped = VitaliCover(small_cover.t, small_cover.centers[1:], small_cover.domain, small_cover.slack)
    assert not certify(dropped, bump2).covering
    crowded = VitaliCover(
        small_cover.t, np.append(small_cover.centers, small_cover.centers[0] + 1), small_cover.domain, small_cover.slack
    )
    assert not certify(crowded, bump2).disjoint


def test_json_round_trip(small_cover, bump2):
    back = VitaliCover.from_json(small_cover.to_json(), bump2, small_cover.domain)
    np.testing.assert_array_equal(back.centers, small_cover.centers)
    assert back.t == small_cover.t and back.disjoint and back.covering


def test_unresolved_scale(bump2):
    with pytest.raises(UnresolvedScaleError):
        build_cover(bump2, np.ones(bump2.grid.shape, bool), (bump2.grid.h) ** 2)


def test_overlap_counts_and_volume_route(small_cover, bump2):
    counts = []
    for x in [(0.0, 0.0), (0.31, -0.2), (-0.5, 0.4)]:
        c2 = overlap_count(small_cover, bump2, x, 2.0)
        c4 = overlap_count(small_cover, bump2, x, 4.0)
        assert 1 <= c2 <= c4
        chk = overlap_volume_check(small_cover, bump2, x, 2.0)
        assert chk.count == c2 and chk.holds
        counts.append(c2)
    assert fit_overlap_constant(counts, 2.0) == max(counts) / 16


def test_overlap_rejects_points_outside_domain(small_cover, bump2):
    with pytest.raises(ValueError):
        overlap_count(small_cover, bump2, (1.95, 1.95), 2.0)
    with pytest.raises(ValueError):
        overlap_count(small_cover, bump2, (0.0, 0.0), 0.5)


def test_volume_check_escapes(small_cover, bump2):
    with pytest.raises(BallEscapesBoxError):
        overlap_volume_check(small_cover, bump2, (1.8, 0.0), 2.0)


def test_annuli_constant_function(small_cover, bump2):
    j = _nearest_origin(small_cover, bump2)
    r = annuli_oscillation(small_cover, bump2, np.full(bump2.grid.size, 4.0), j, 0)
    assert r.lhs == pytest.approx(0.0, abs=1e-20) and r.rhs == pytest.approx(0.0, abs=1e-20)
    assert r.ratio == 0.0 or r.ratio < 1e-6


@pytest.mark.parametrize("which,k", [("bump", 0), ("flat", 0), ("flat", 1)])
def test_annuli_double_sum_matches_brute_force(small_cover, flat_cover, bump2, flat2, which, k):
    cover, metric = (small_cover, bump2) if which == "bump" else (flat_cover, flat2)
    j = _nearest_origin(cover, metric)
    f = TestFunctionSet.generate(2, 1, seed=9).functions[0]
    r = annuli_oscillation(cover, metric, f, j, k)
    assert r.rhs * r.denominator == pytest.approx(annuli_double_sum(metric, cover, f, j, k), rel=1e-9)
    assert r.doubling_slack > 1 and r.lhs > 0


@given(lam=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_annuli_ratio_invariance(small_cover, bump2, lam, shift):
    j = _nearest_origin(small_cover, bump2)
    v = TestFunctionSet.generate(2, 2, seed=1).functions[1].field(bump2.grid).values.ravel()
    a = annuli_oscillation(small_cover, bump2, v, j, 0)
    b = annuli_oscillation(small_cover, bump2, lam * v + shift, j, 0)
    assert b.ratio == pytest.approx(a.ratio, rel=1e-7)


def test_annulus_escaping_domain(small_cover, bump2):
    j = _nearest_origin(small_cover, bump2)
    with pytest.raises(BallEscapesBoxError):
        annuli_oscillation(small_cover, bump2, np.zeros(bump2.grid.size), j, 1)


def test_constant_factor_keeps_flat_cover_count():
    g = build_grid(2, 1.5, 49)
    dom = np.ones(g.shape, bool)
    base = build_cover(ConformalMetric.from_u(g, np.zeros(g.shape)), dom, 0.25)
    big = build_cover(ConformalMetric.from_u(g, np.full(g.shape, math.log(2.0))), dom, 1.0)
    np.testing.assert_array_equal(base.centers, big.centers)
