import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singular_ma.grid import ConvexGridFunction, GridSpec
from singular_ma.sections import (
    axis_lengths,
    breadth,
    collar,
    dump_records,
    extract_section,
    hbar_map,
    maximal_height,
    property_F,
    restrict,
    verify_balancing,
    verify_engulfing,
    verify_volume_growth,
    vitali_balls,
    vitali_sections,
)


def half_sq(x):
    return 0.5 * np.sum(x**2, axis=-1)


@pytest.fixture(scope="module")
def disk():
    g = GridSpec.ball(2, 65)
    return ConvexGridFunction.sample(g, half_sq)


def collar_oracle(g, x):
    # for |y|^2/2 the height over the tangent plane at x is |y - x|^2 / 2
    Y = g.coords[collar(g)]
    return 0.5 * np.min(np.sum((Y - x) ** 2, axis=1))


# -- sections and h-bar -----------------------------------------------------------


def test_section_members_match_distance_oracle(disk):
    g = disk.grid
    node = g.index_of([0.25, -0.125])
    x = g.point(node)
    sec = extract_section(disk, node, x, 0.02)
    ref = g.mask & (0.5 * np.sum((g.coords - x) ** 2, axis=-1) < 0.02)
    np.testing.assert_array_equal(sec.members, ref)
    assert sec.compactly_contained
    assert sec.volume == pytest.approx(np.pi * 2 * 0.02, rel=0.1)


def test_section_height_must_be_positive(disk):
    with pytest.raises(ValueError):
        extract_section(disk, (32, 32), None, 0.0)


def test_wrong_slope_rejected_when_checked(disk):
    with pytest.raises(ValueError):
        extract_section(disk, (32, 32), [0.5, 0.0], 0.1, check_slope=True)
    extract_section(disk, (32, 32), [0.0, 0.0], 0.1, check_slope=True)


def test_hbar_at_centre_of_quadratic_disk(disk):
    g = disk.grid
    mh = maximal_height(disk, g.index_of([0, 0]))
    assert abs(mh.hbar - 0.5) <= 2 * g.h
    assert mh.hbar == pytest.approx(collar_oracle(g, np.zeros(2)), abs=1e-14)
    assert not mh.singular


def test_hbar_is_the_largest_compact_height(disk):
    # second route: bisection on the compact-containment flag
    g = disk.grid
    node = g.index_of([0.3, 0.2])
    x = g.point(node)
    hb = maximal_height(disk, node, x).hbar
    assert hb == pytest.approx(collar_oracle(g, x), abs=1e-14)
    lo, hi = 0.0, 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if extract_section(disk, node, x, mid).compactly_contained:
            lo = mid
        else:
            hi = mid
    assert hb == pytest.approx(lo, abs=1e-12)


def test_hbar_map_matches_collar_oracle(disk):
    g = disk.grid
    hm = hbar_map(disk)
    rng = np.random.default_rng(0)
    nodes = np.argwhere(np.isfinite(hm) & ~collar(g))
    for node in nodes[rng.choice(len(nodes), 40, replace=False)]:
        x = g.point(tuple(node))
        assert hm[tuple(node)] == pytest.approx(collar_oracle(g, x), abs=1e-12)


def test_collar_nodes_are_singular(disk):
    g = disk.grid
    node = np.argwhere(g.boundary)[0]
    assert maximal_height(disk, tuple(node)).singular


def test_affine_direction_is_singular_everywhere():
    g = GridSpec.box([-1, -1], [1, 1], (33, 33))
    inner = g.mask & ~collar(g)
    flat = ConvexGridFunction.sample(g, lambda x: np.abs(x[:, 0]) + 0.5 * x[:, 0] ** 2)
    np.testing.assert_array_equal(hbar_map(flat)[inner], 0.0)
    # a kink alone is not enough: |x1| + |x|^2/2 has bounded sections
    kinked = ConvexGridFunction.sample(g, lambda x: np.abs(x[:, 0]) + half_sq(x))
    assert np.all(hbar_map(kinked)[inner] > 0)


def test_records_serialise(disk):
    g = disk.grid
    mh = maximal_height(disk, (32, 32))
    rec = extract_section(disk, (32, 32), mh.slope, 0.1).record(g, mh.hbar)
    assert set(rec) == {"x", "p", "h", "volume", "hull_volume", "semi_lengths", "compact", "hbar"}
    back = json.loads(dump_records([rec]))[0]
    assert back["hbar"] == mh.hbar and len(back["semi_lengths"]) == 2
    assert back["hull_volume"] <= back["volume"] * 1.2


# -- geometry --------------------------------------------------------------------


def test_balancing_on_quadratic(disk):
    c0 = disk.grid.index_of([0, 0])
    for h in (0.05, 0.1, 0.2):
        b = verify_balancing(disk, c0, h)
        assert 0.8 <= b.inner_scale <= 1.25 and 0.8 <= b.outer_scale <= 1.25
        np.testing.assert_allclose(b.ellipsoid.semi_lengths, np.sqrt(2 * h), rtol=0.1)


def test_engulfing_constant_of_quadratic(disk):
    # sqrt(2 delta h) <= sqrt(2 h) / 2 gives delta = 1/4 exactly
    d = verify_engulfing(disk, disk.grid.index_of([0, 0]), 0.2)
    assert 0.2 <= d <= 0.3
    assert d == pytest.approx(0.25, abs=0.02)


def test_engulfing_needs_compact_section(disk):
    with pytest.raises(ValueError):
        verify_engulfing(disk, (32, 32), 5.0)


def test_breadth_and_axis_lengths(disk):
    c0 = disk.grid.index_of([0, 0])
    assert breadth(disk, c0, 0.1) == pytest.approx(2 * np.sqrt(0.2), rel=0.05)
    w = restrict(ConvexGridFunction.sample(GridSpec.cylinder(33), half_sq))
    L = axis_lengths(w, w.grid.index_of([0, 0]), 0.1)
    np.testing.assert_allclose(L, 2 * np.sqrt(0.2), rtol=0.1)


def test_volume_growth_ratio_is_constant_for_quadratic():
    g = GridSpec.ball(2, 513)
    u = ConvexGridFunction.sample(g, half_sq)
    rep = verify_volume_growth(u, g.index_of([0, 0]), np.geomspace(1e-3, 1e-1, 9), p=np.zeros(2))
    assert not rep.flagged
    assert rep.ratios.max() / rep.ratios.min() <= 1.1
    np.testing.assert_allclose(rep.ratios, 2 * np.pi, rtol=0.05)


def test_volume_growth_flags_a_flat_direction():
    g = GridSpec.box([-1] * 3, [1] * 3, (65, 65, 65))
    u = ConvexGridFunction.sample(g, lambda x: np.abs(x[:, 0]))
    rep = verify_volume_growth(u, g.index_of([0, 0, 0]), 2.0 ** -np.arange(2, 12), p=np.zeros(3))
    assert rep.flagged


# -- restriction -------------------------------------------------------------------


def test_restriction_of_cylinder_is_a_disk():
    g = GridSpec.cylinder(17)
    u = ConvexGridFunction.sample(g, lambda x: half_sq(x) + x[:, 2])
    w = restrict(u, hbar_parent=0.3)
    assert w.grid.shape == "ball" and w.grid.dim == 2
    k = g.index_of([0, 0, 0])[2]
    np.testing.assert_array_equal(w.function.values, u.values[:, :, k])
    with pytest.raises(ValueError):
        restrict(u, offset=0.01)


def test_restriction_of_box_along_first_axis():
    g = GridSpec.box([-1, -2, 0], [1, 2, 1], (5, 9, 3))
    u = ConvexGridFunction.sample(g, half_sq)
    w = restrict(u, axis=0, offset=0.0)
    assert w.grid.counts == (9, 3) and w.grid.shape == "box"


def test_property_F_by_hand():
    g = GridSpec.cylinder(17)
    w = restrict(ConvexGridFunction.sample(g, half_sq), hbar_parent=0.1)
    y = w.grid.index_of([0.5, 0.0])
    # tangent plane of |y|^2/2 at y, evaluated at 0: -|y|^2/2 = -0.125
    p = [0.5, 0.0]
    assert property_F(w, y, 0.25, p)
    assert not property_F(w, y, 0.2, p)


# -- Vitali covers -------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_vitali_balls_disjoint_and_covering(seed, count):
    rng = np.random.default_rng(seed)
    C = rng.uniform(-1, 1, size=(count, 2))
    R = rng.uniform(0.01, 0.3, size=count)
    sub = vitali_balls(C, R)
    assert sub.disjoint and sub.covers
    # oracle: every ball meets a chosen ball at least as large
    S = np.array(sub.selected)
    for i in range(count):
        d = np.linalg.norm(C[S] - C[i], axis=1)
        assert np.any((d < R[S] + R[i] + 1e-12) & (R[S] >= R[i]))
    # that ball's 3x dilation already covers sampled points of ball i
    pts = C[:, None] + R[:, None, None] * rng.uniform(-0.7, 0.7, size=(count, 8, 2))
    assert vitali_balls(C, R, 3.0, check_points=pts.reshape(-1, 2)).covers


def test_vitali_selection_is_deterministic_on_ties():
    C = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0]])
    sub = vitali_balls(C, [0.2, 0.2, 0.2])
    assert sub.selected == [0, 2]


def test_vitali_sections_on_quadratic(disk):
    g = disk.grid
    nodes = [g.index_of(p) for p in ([0, 0], [0.125, 0], [0.5, 0.25], [-0.25, -0.25])]
    P = [g.point(n) for n in nodes]
    sub = vitali_sections(disk, nodes, [0.05, 0.02, 0.03, 0.01], 0.25, P)
    assert sub.disjoint and sub.covers
    assert sub.selected[0] == 0


# -- further ground truths -------------------------------------------------------------


def test_tiny_height_keeps_only_the_base_node(disk):
    g = disk.grid
    node = g.index_of([0.25, 0.5])
    sec = extract_section(disk, node, g.point(node), 1e-12)
    assert sec.count == 1 and sec.members[node]
    assert not extract_section(disk, node, g.point(node) + 10, 1e-12).empty


@pytest.mark.parametrize("x", [[0.0, 0.0], [0.5, 0.0], [-0.25, 0.375]])
def test_section_of_max_function_matches_enumeration(x):
    g = GridSpec.box([-1, -1], [1, 1], (41, 41))
    f = lambda y: np.maximum(np.abs(y[..., 0]), 0.5 * np.sum(y**2, axis=-1))
    u = ConvexGridFunction.sample(g, f)
    node = g.index_of(x)
    p = np.array([0.3, 0.0]) if x[0] == 0 else np.sign(x[0]) * np.array([1.0, 0.0])
    for h in (0.05, 0.2):
        sec = extract_section(u, node, p, h)
        ref = np.zeros(g.counts, dtype=bool)
        for idx in np.ndindex(*g.counts):
            y = g.point(idx)
            ref[idx] = f(y) < f(g.point(node)) + p @ (y - g.point(node)) + h
        np.testing.assert_array_equal(sec.members, ref)


@pytest.mark.parametrize("t", [0.25, 0.5, 0.75])
def test_hbar_off_centre_of_quadratic(disk, t):
    g = disk.grid
    node = g.index_of([t, 0.0])
    hb = maximal_height(disk, node, g.point(node)).hbar
    # the collar costs at most one spacing of distance
    assert 0.5 * (1 - t - g.h) ** 2 - 1e-12 <= hb <= 0.5 * (1 - t) ** 2
    assert abs(np.sqrt(2 * hb) - (1 - t)) <= 2 * g.h


def test_hbar_bracket_at_relative_epsilon(disk):
    g = disk.grid
    node = g.index_of([-0.5, 0.25])
    mh = maximal_height(disk, node)
    assert extract_section(disk, node, mh.slope, mh.hbar * (1 - 1e-4)).compactly_contained
    assert not extract_section(disk, node, mh.slope, mh.hbar * (1 + 1e-4)).compactly_contained


def test_kink_with_curved_direction_is_not_singular():
    # |x1| + x2^2/2 is strictly convex along {x1 = 0}: sections stay bounded
    g = GridSpec.ball(2, 65)
    u = ConvexGridFunction.sample(g, lambda x: np.abs(x[:, 0]) + 0.5 * x[:, 1] ** 2)
    for y in (0.0, 0.25, -0.5):
        mh = maximal_height(u, g.index_of([0.0, y]))
        assert not mh.singular
        assert abs(np.sqrt(2 * mh.hbar) - (1 - abs(y))) <= 2 * g.h


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5), st.integers(0, 64), st.integers(0, 64))
def test_sections_are_nested(disk, h1, h2, i, j):
    g = disk.grid
    if not g.mask[i, j]:
        return
    lo, hi = sorted((h1, h2))
    a = extract_section(disk, (i, j), None, lo).members
    b = extract_section(disk, (i, j), None, hi).members
    assert np.all(b[a])


def anisotropic(n=65):
    g = GridSpec.ball(2, n)
    return ConvexGridFunction.sample(g, lambda x: 0.5 * (x[:, 0] ** 2 + 9 * x[:, 1] ** 2))


def test_anisotropic_axes_balancing_and_engulfing():
    u = anisotropic(129)
    c0 = u.grid.index_of([0, 0])
    sec = extract_section(u, c0, None, 0.2)
    d = 2 * sec.john_for(u.grid).semi_lengths
    assert d[0] / d[1] == pytest.approx(3.0, rel=0.1)
    b = verify_balancing(u, c0, 0.05)
    assert 0.5 <= b.inner_scale <= 2 and 0.5 <= b.outer_scale <= 2
    assert verify_engulfing(u, c0, 0.05) == pytest.approx(0.25, abs=0.03)


def test_restricted_anisotropic_axis_ratio():
    g = GridSpec.box([-1, -1, -1], [1, 1, 1], (129, 129, 5))
    u = ConvexGridFunction.sample(g, lambda x: 0.5 * (x[:, 0] ** 2 + 9 * x[:, 1] ** 2) + x[:, 2] ** 2)
    w = restrict(u)
    d = axis_lengths(w, w.grid.index_of([0, 0]), 0.3)
    assert d[0] >= d[1] and d[0] / d[1] == pytest.approx(3.0, rel=0.1)


def test_property_F_at_normalised_origin():
    g = GridSpec.cylinder(17)
    w = restrict(ConvexGridFunction.sample(g, half_sq), hbar_parent=0.2)
    o = w.grid.index_of([0, 0])
    assert property_F(w, o, 0.2) and property_F(w, o, 0.3) and not property_F(w, o, 0.19)
    flat = restrict(ConvexGridFunction.sample(g, half_sq), hbar_parent=0.0)
    y = flat.grid.index_of([0.5, 0.25])
    assert property_F(flat, y, 1e-9, [0.0, 0.0])


def test_breadth_of_a_box_section():
    g = GridSpec.box([-1, -1], [1, 1], (41, 41))
    u = ConvexGridFunction.sample(g, lambda x: np.maximum(np.abs(x[:, 0]) / 0.8, np.abs(x[:, 1]) / 0.4))
    # the section {|x1| < 0.4, |x2| < 0.2} at height 0.5 is a box; its nodes span 0.35 in x2
    b = breadth(u, g.index_of([0, 0]), 0.5, [0.0, 0.0])
    assert b == pytest.approx(0.35, abs=1e-9)


def test_affine_invariance_of_john_volume():
    # u(A^-1 y) on the stretched grid: sections map to sections, products of
    # semi-lengths scale by |det A|
    A = np.array([2.0, 0.5])
    g = GridSpec.box([-1, -1], [1, 1], (129, 129))
    gA = GridSpec.box(-A, A, (129, 129))
    f = lambda x: 0.5 * x[:, 0] ** 2 + x[:, 1] ** 2 + 0.2 * x[:, 0] * x[:, 1]
    u = ConvexGridFunction.sample(g, f)
    uA = ConvexGridFunction.sample(gA, lambda y: f(y / A))
    for h in (0.05, 0.1):
        e = extract_section(u, (64, 64), [0.0, 0.0], h).john_for(g).semi_lengths
        eA = extract_section(uA, (64, 64), [0.0, 0.0], h).john_for(gA).semi_lengths
        assert np.prod(eA) / np.prod(e) == pytest.approx(np.prod(A), rel=0.05)


def test_vitali_small_families():
    assert vitali_balls([[0.0, 0.0]], [0.3]).selected == [0]
    two = vitali_balls([[0.0, 0.0], [1.0, 0.0]], [0.3, 0.2])
    assert sorted(two.selected) == [0, 1] and two.disjoint and two.covers


def test_vitali_hundred_balls_on_a_fine_grid():
    rng = np.random.default_rng(11)
    C = rng.uniform(-1, 1, size=(100, 2))
    R = rng.uniform(0.02, 0.25, size=100)
    s = np.linspace(-1.3, 1.3, 261)
    P = np.stack(np.meshgrid(s, s), axis=-1).reshape(-1, 2)
    sub = vitali_balls(C, R, check_points=P)
    assert sub.disjoint and sub.covers
    sel = np.array(sub.selected)
    d = np.linalg.norm(C[sel][:, None] - C[sel][None], axis=-1) + np.eye(len(sel)) * 9
    assert np.all(d >= R[sel][:, None] + R[sel][None])
