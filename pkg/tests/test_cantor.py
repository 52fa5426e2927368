from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singular_ma.cantor import (
    SpikeFunction,
    brute_force_v,
    build_cantor,
    closed_form_removed_length,
    exact_lengths,
    f_eval,
    separation_ratio,
    survivor_mass_closed_form,
    v_separation_check,
)


@pytest.fixture(scope="module")
def cantor12():
    return build_cantor(12)


def test_first_removal_is_five_sixths():
    l, L = exact_lengths(1)
    assert l[1] == Fraction(5, 6)
    assert L[1] == Fraction(1, 12)


@pytest.mark.parametrize("k", range(1, 31))
def test_recurrence_matches_closed_product(k):
    l, _ = exact_lengths(k)
    assert l[k] == closed_form_removed_length(k)


@pytest.mark.parametrize("K", [1, 2, 5, 17, 30])
def test_lengths_exhaust_the_unit_interval(K):
    c = build_cantor(K)
    assert c.total_removed + 2**K * c.exact_survivor[K] == 1


@pytest.mark.parametrize("k", range(1, 26))
def test_survivor_mass_closed_form(k):
    _, L = exact_lengths(k)
    assert 2**k * L[k] == survivor_mass_closed_form(k)


def test_removed_intervals_are_disjoint_and_inside(cantor12):
    ivs = np.vstack([cantor12.removed_intervals(k) for k in range(1, 11)])
    ivs = ivs[np.argsort(ivs[:, 0])]
    assert ivs[0, 0] > -0.5 and ivs[-1, 1] < 0.5
    assert np.all(ivs[1:, 0] >= ivs[:-1, 1])
    assert cantor12.removed_count(10) == len(cantor12.centers(10)) == 2**9


def test_survivor_intervals_have_common_length(cantor12):
    s = cantor12.survivors(7)
    assert s.shape == (128, 2)
    np.testing.assert_allclose(s[:, 1] - s[:, 0], cantor12.survivor_lengths[7], rtol=1e-9)


def test_depth_bounds():
    with pytest.raises(ValueError):
        build_cantor(0)
    with pytest.raises(ValueError):
        build_cantor(61)


def test_json_lists_levels(cantor12):
    import json

    d = json.loads(cantor12.to_json(explicit_depth=3))
    assert d["depth"] == 12 and len(d["levels"]) == 12
    assert d["levels"][0]["centers"] == [0.0]
    assert "centers" not in d["levels"][5]


# -- the profile -----------------------------------------------------------


def test_profile_branches():
    assert f_eval(0.5) == 0.5
    assert f_eval(2.0) == 3.0
    assert f_eval(-1.0) == 1.0


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_profile_is_convex_and_above_shifted_abs(a, b, t):
    mid = f_eval(t * a + (1 - t) * b)
    assert mid <= t * f_eval(a) + (1 - t) * f_eval(b) + 1e-12
    assert f_eval(a) >= abs(a) - 1


# -- the spike function ------------------------------------------------------


@pytest.mark.parametrize("kink", [1.0, 0.5])
@pytest.mark.parametrize("depth", [1, 3, 8])
def test_tree_evaluation_matches_direct_sum(cantor12, depth, kink):
    # oracle: enumerate every center
    x = np.linspace(-1, 1, 401)
    v = SpikeFunction(cantor12, depth, kink)
    ref = brute_force_v(cantor12, x, depth, kink)
    np.testing.assert_allclose(v.value(x), ref, rtol=1e-12, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1))
def test_tree_evaluation_matches_direct_sum_anywhere(x):
    c = build_cantor(9)
    v = SpikeFunction(c, 9)
    assert v.value(x) == pytest.approx(float(brute_force_v(c, [x], 9)[0]), rel=1e-12, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.99, 0.99))
def test_one_sided_slopes_match_differences(x):
    c = build_cantor(8)
    v = SpikeFunction(c, 8)
    eps = 1e-7
    fwd = (v.value(x + eps) - v.value(x)) / eps
    bwd = (v.value(x) - v.value(x - eps)) / eps
    # a kink closer than eps would break the comparison; skip those
    lo, hi = v.subgradient(x)
    smooth = abs(v.slope(x + eps, -1) - v.slope(x - eps, 1)) < 1e-9
    if smooth:
        assert fwd == pytest.approx(hi, rel=1e-4, abs=1e-4)
        assert bwd == pytest.approx(lo, rel=1e-4, abs=1e-4)
    assert lo <= hi + 1e-9


def test_slopes_at_survivor_endpoints_match_differences(cantor12):
    v = SpikeFunction(cantor12, 10)
    xs = cantor12.survivor_endpoints(6)
    eps = 1e-9
    fwd = (v.value(xs + eps) - v.value(xs)) / eps
    bwd = (v.value(xs) - v.value(xs - eps)) / eps
    np.testing.assert_allclose(v.slope(xs, 1), fwd, atol=1e-3 * np.abs(fwd).max())
    np.testing.assert_allclose(v.slope(xs, -1), bwd, atol=1e-3 * np.abs(bwd).max())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40))
def test_slopes_nondecreasing(xs):
    v = SpikeFunction(build_cantor(10), 10)
    xs = np.unique(np.asarray(xs))
    lo, hi = v.slope(xs, -1), v.slope(xs, 1)
    assert np.all(lo <= hi + 1e-9)
    assert np.all(hi[:-1] <= lo[1:] + 1e-9 * (1 + np.abs(lo[1:])))


def test_slope_jump_at_each_outer_kink(cantor12):
    # each summand bends by k^4 l_k at |x - c| = l_k
    v = SpikeFunction(cantor12, 6)
    for k in range(2, 7):
        c = cantor12.centers(k)[0]
        x = c + cantor12.removed_lengths[k]
        jump = v.slope(x, 1) - v.slope(x, -1)
        assert jump >= k**4 * cantor12.removed_lengths[k] * (1 - 1e-9)


def test_center_summand_vanishes(cantor12):
    # f(0) = 0: the level-k term centered at x contributes nothing at x
    c = cantor12.centers(3)[1]
    lk = cantor12.removed_lengths[3]
    assert 3**4 * lk**2 * f_eval((c - c) / lk) == 0


def test_values_grow_with_depth_and_stay_within_tail(cantor12):
    x = np.linspace(-1, 1, 101)
    prev = SpikeFunction(cantor12, 4).value(x)
    for K in range(5, 13):
        cur = SpikeFunction(cantor12, K).value(x)
        assert np.all(cur >= prev - 1e-12)
        assert np.max(cur - prev) <= SpikeFunction(cantor12, K - 1).tail_bound()
        prev = cur


def test_sup_bound_is_finite_and_valid(cantor12):
    v = SpikeFunction(cantor12, 12)
    x = np.linspace(-1, 1, 2001)
    assert np.all(np.abs(v.value(x)) <= v.sup_bound())
    assert np.isfinite(v.sup_bound())


def test_quadratic_control_separation_vanishes():
    # for x^2/2 the separation ratio 1/(2|log r|^4) tends to 0
    r = np.array([1e-2, 1e-4, 1e-8])
    ratio = 0.5 * r**2 / (r**2 * np.abs(np.log(r)) ** 4)
    assert np.all(np.diff(ratio) < 0) and ratio[-1] < 1e-4


def test_separation_with_kinks_on_gap_endpoints_is_stable(cantor12):
    # measured: with the outer kink at |z| = 1/2 the minimum ratio over
    # depth-6 endpoints and r = l_k, 3 <= k <= 6, is 0.1943 (frozen)
    v = SpikeFunction(build_cantor(16), 16, kink=0.5)
    mins = []
    for depth in (6, 8):
        xs = cantor12.survivor_endpoints(depth)
        rs = cantor12.removed_lengths[3:depth + 1]
        X, R = np.meshgrid(xs, rs, indexing="ij")
        ok = X + R < 0.5
        mins.append(float(separation_ratio(v, X[ok], R[ok]).min()))
    assert mins[0] == pytest.approx(0.1943, abs=5e-4)
    assert 0.5 <= mins[1] / mins[0] <= 2


def test_separation_check_rejects_radii_out_of_range(cantor12):
    v = SpikeFunction(cantor12, 10)
    with pytest.raises(ValueError):
        v_separation_check(v, 0.4, 0.9)
    with pytest.raises(ValueError):
        v_separation_check(v, 0.4, cantor12.removed_lengths[10] / 2)
    assert np.isfinite(v_separation_check(v, -0.5, cantor12.removed_lengths[4]))
