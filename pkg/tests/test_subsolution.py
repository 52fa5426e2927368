import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from singular_ma.subsolution import (
    Subsolution,
    fd_agreement,
    halton_region,
    verify_subsolution,
)


@pytest.fixture(scope="module")
def sym_hessian():
    # independent oracle: differentiate the closed form symbolically
    x1, x2, x3 = sp.symbols("x1 x2 x3", positive=True)
    g = x1**2 * (-sp.log(x1)) ** 4 + x2 / (-sp.log(x2))
    w = g * (1 + x3**2 / (-sp.log(g)))
    H = sp.hessian(w, (x1, x2, x3))
    return sp.lambdify((x1, x2, x3), H, "numpy")


def oracle(sym_hessian, y, scale, amp):
    # w is even in x1 and x2: evaluate at |x| and flip the mixed signs
    x = np.asarray(y) * np.asarray(scale)
    H = np.array(sym_hessian(abs(x[0]), abs(x[1]), x[2]), dtype=float)
    s = np.array([np.sign(x[0]), np.sign(x[1]), 1.0])
    return amp * H * np.outer(s, s) * np.outer(scale, scale)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(1e-4, 0.09), st.floats(1e-4, 0.09), st.floats(-0.9, 0.9),
    st.sampled_from([-1.0, 1.0]), st.sampled_from([-1.0, 1.0]),
)
def test_analytic_hessian_matches_symbolic(sym_hessian, a, b, c, s1, s2):
    W = Subsolution(2.0, (1.0, 1.0, 1.0))
    y = np.array([s1 * a, s2 * b, c])
    H = W.hessian(y)
    ref = oracle(sym_hessian, y, W.scale, 2.0)
    np.testing.assert_allclose(H, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_scaled_hessian_matches_symbolic(sym_hessian):
    W = Subsolution(7.5, (1 / 32, 1 / 64, 0.5))
    for y in halton_region(20, (1.0, 1.0, 1.0), seed=3):
        np.testing.assert_allclose(W.hessian(y), oracle(sym_hessian, y, W.scale, 7.5),
                                   rtol=1e-9, atol=1e-13)


def test_gradient_matches_value_differences():
    W = Subsolution(3.0, (0.1, 0.1, 1.0))
    Y = halton_region(50, (0.8, 0.8, 0.8), seed=1)
    eps = 1e-7
    for y in Y:
        fd = [(W.value(y + eps * e) - W.value(y - eps * e)) / (2 * eps) for e in np.eye(3)]
        np.testing.assert_allclose(W.gradient(y), fd, rtol=1e-5, atol=1e-9)


def test_finite_difference_hessian_agrees_away_from_axes():
    W = verify_subsolution(2000, seed=2).subsolution
    Y = halton_region(500, (0.1, 0.1, 0.5), seed=5, margin=1e-3)
    assert fd_agreement(W, Y).max() <= 1e-4


def test_hessian_is_symmetric():
    W = Subsolution(1.0, (0.05, 0.05, 1.0))
    H = W.hessian(halton_region(200, (1, 1, 1), seed=0))
    np.testing.assert_array_equal(H, np.swapaxes(H, -1, -2))


def test_axes_values_by_continuity_and_flagged_hessian():
    W = Subsolution(1.0, (0.1, 0.1, 1.0))
    z = np.linspace(-0.99, 0.99, 7)
    pts = np.column_stack([0 * z, 0 * z, z])
    np.testing.assert_array_equal(W.value(pts), 0.0)
    assert np.all(np.isnan(W.hessian(pts)))
    axes = np.array([[0.0, 0.3, 0.2], [0.3, -0.0, 0.2], [1e-9, 0.3, 0.2]])
    assert W.degenerate_mask(axes).tolist() == [True, True, False]
    assert np.all(np.isfinite(W.hessian(axes[2])))
    # continuity across x1 = 0
    assert W.value([1e-12, 0.3, 0.2]) == pytest.approx(float(W.value([0.0, 0.3, 0.2])), abs=1e-12)


def test_slice_x3_zero_is_g():
    W = Subsolution(1.0, (1.0, 1.0, 1.0))
    a, b = 0.03, 0.02
    g = a**2 * np.log(a) ** 4 + b / abs(np.log(b))
    assert float(W.value([a, b, 0.0])) == pytest.approx(g, rel=1e-14)


def test_slice_x3_zero_determinant_is_block_product():
    W = Subsolution(1.0, (1.0, 1.0, 1.0))
    y = np.array([0.01, 0.02, 0.0])
    H = W.hessian(y)
    assert H[0, 2] == H[1, 2] == H[0, 1] == 0.0
    assert np.linalg.det(H) == pytest.approx(H[0, 0] * H[1, 1] * H[2, 2], rel=1e-12)
    Hf = W.hessian_fd(y)[0]
    assert np.linalg.det(Hf) == pytest.approx(np.linalg.det(H), rel=0.2)


def test_alpha_beta_relation_enforced():
    with pytest.raises(ValueError):
        Subsolution(alpha=3.0, beta=1.0)
    Subsolution(alpha=6.0, beta=2.0)


def test_value_rejects_large_arguments():
    with pytest.raises(ValueError):
        Subsolution(1.0, (1.0, 1.0, 1.0)).value([0.9, 0.9, 0.0])


@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_leading_terms_carry_factor_four_beta(beta):
    # at x3 = 0 and tiny |x1|, |x2| the determinant approaches 4 beta (t1 + t2)
    W = Subsolution(1.0, (1.0, 1.0, 1.0), alpha=2 + 2 * beta, beta=beta)
    rng = np.random.default_rng(0)
    Y = np.column_stack([10.0 ** rng.uniform(-60, -40, 20), 10.0 ** rng.uniform(-60, -40, 20), np.zeros(20)])
    ratio = W.det_hessian(Y) / (4 * beta * W.leading_terms(Y))
    np.testing.assert_allclose(ratio, 1.0, rtol=0.2)


def test_first_term_dominates_below_the_cubic():
    W = Subsolution()
    rng = np.random.default_rng(1)
    a = 10.0 ** rng.uniform(-4, -1.5, 50)
    b = a**3 * rng.uniform(0.01, 0.99, 50)
    L1, L2 = -np.log(a), -np.log(b)
    g = a**2 * L1**4 + b / L2
    t1 = a**2 * L1**8 / (b * L2**2 * -np.log(g))
    t2 = L1**4 / (L2**3 * -np.log(g))
    assert np.all(t1 > t2)
    np.testing.assert_allclose(W.leading_terms(np.column_stack([a, b, 0 * a])), t1 + t2, rtol=1e-12)


def test_halton_region_respects_margins_and_signs():
    Y = halton_region(4000, (0.1, 0.2, 0.5), seed=4)
    assert np.all(np.abs(Y[:, 0]) > 1e-6) and np.all(np.abs(Y[:, 0]) < 0.1)
    assert np.all(np.abs(Y[:, 1]) > 1e-6) and np.all(np.abs(Y[:, 1]) < 0.2)
    assert np.all(np.abs(Y[:, 2]) < 0.5)
    for k in (0, 1):
        assert 0.4 < np.mean(Y[:, k] > 0) < 0.6


def test_verify_subsolution_default_region():
    rep = verify_subsolution(10_000)
    assert rep.ok and rep.indefinite_at is None
    assert rep.min_det >= 1.0 and rep.min_eigenvalue >= 0.0
    Y = halton_region(10_000, (0.1, 0.1, 0.5), seed=0)
    assert np.all(np.linalg.eigvalsh(rep.subsolution.hessian(Y))[:, 0] >= 0)
    assert rep.subsolution.det_hessian(Y).min() >= 1.0


def test_verify_subsolution_is_deterministic():
    a = verify_subsolution(500, seed=9)
    b = verify_subsolution(500, seed=9)
    assert a.amplitude == b.amplitude and a.scale == b.scale
