import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spqrx.splines import (SplineBasis, SplineMixture, basis_matrices, build_basis,
                           ispline_eval, local_basis, mspline_eval)

from conftest import cox_de_boor_mspline, simpson


def uniform_grid_basis(K, d):
    return build_basis(K, d, np.linspace(0.0, 1.0, 1001))


# -- build_basis -------------------------------------------------------------

def test_order_one_uniform_grid_knots():
    b = build_basis(4, 1, np.linspace(0.0, 1.0, 10001))
    np.testing.assert_allclose(b.knots, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-12)


def test_knot_vector_shape_and_boundaries():
    rng = np.random.default_rng(0)
    b = build_basis(25, 3, rng.beta(2, 5, 2000))
    assert b.knots.shape == (28,)
    assert np.all(np.diff(b.knots) >= 0)
    assert b.knots[0] == 0.0 and b.knots[-1] == 1.0
    assert np.all(b.knots[:3] == 0.0) and np.all(b.knots[25:] == 1.0)
    assert b.breakpoints.size == 25 - 3 + 2


def test_interior_knots_track_uniform_quantiles():
    rng = np.random.default_rng(1)
    b = build_basis(15, 3, rng.random(1000))
    ideal = np.arange(1, 13) / 13
    assert np.max(np.abs(b.interior_knots - ideal)) < 0.05


@pytest.mark.parametrize("sample, K, d", [([], 5, 3), ([0.2, 1.5], 5, 3), ([-0.1], 5, 3),
                                          ([0.5], 2, 3)])
def test_build_basis_rejects_bad_input(sample, K, d):
    with pytest.raises(ValueError):
        build_basis(K, d, sample)


def test_tied_quantiles_are_separated_with_warning():
    with pytest.warns(RuntimeWarning):
        b = build_basis(10, 3, np.full(100, 0.4))
    assert np.all(np.diff(b.breakpoints) > 0)


def test_basis_round_trips_through_dict():
    b = build_basis(9, 3, np.random.default_rng(2).random(50))
    c = SplineBasis.from_dict(b.to_dict())
    assert np.array_equal(b.knots, c.knots) and c.num_basis == 9 and c.order == 3


# -- M- and I-splines ----------------------------------------------------------

def test_order_one_single_basis_is_uniform_density():
    b = SplineBasis(order=1, knots=np.array([0.0, 1.0]), num_basis=1)
    assert mspline_eval(b, 0, 0.3) == 1.0


def test_mspline_zero_outside_support():
    b = uniform_grid_basis(10, 3)
    t = b.knots
    ys = np.linspace(0.0, 1.0, 2001)
    for k in range(10):
        out = (ys <= t[k]) | (ys >= t[k + 3])
        if t[k] == 0.0:
            out &= ys > 0.0  # right-continuous at the left boundary
        if t[k + 3] == 1.0:
            out &= ys < 1.0  # left-continuous at y = 1
        assert np.all(mspline_eval(b, k, ys[out]) == 0.0)


@pytest.mark.parametrize("K", [10, 15, 25])
def test_msplines_integrate_to_one(K):
    b = uniform_grid_basis(K, 3) if K == 10 else build_basis(
        K, 3, np.random.default_rng(K).beta(2, 5, 3000))
    for k in range(K):
        val = simpson(lambda y: mspline_eval(b, k, y), b.breakpoints, panels=64)
        assert abs(val - 1.0) < 1e-8


def test_ispline_boundaries_and_midpoint_quadrature():
    b = build_basis(12, 3, np.random.default_rng(3).random(500))
    br = b.breakpoints
    for k in range(12):
        assert ispline_eval(b, k, 0.0) == 0.0
        assert abs(ispline_eval(b, k, 1.0) - 1.0) < 1e-12
        cut = np.append(br[br < 0.5], 0.5)
        q = simpson(lambda y: mspline_eval(b, k, y), cut, panels=64)
        assert abs(ispline_eval(b, k, 0.5) - q) < 1e-8


def test_basis_matrices_match_elementwise():
    b = build_basis(8, 3, np.random.default_rng(4).random(200))
    ys = np.random.default_rng(5).random(37)
    M, I = basis_matrices(b, ys)
    assert M.shape == I.shape == (8, 37)
    for k in range(8):
        assert np.array_equal(M[k], mspline_eval(b, k, ys))
        assert np.array_equal(I[k], ispline_eval(b, k, ys))


def test_basis_matrices_replicated_and_boundary_columns():
    b = build_basis(8, 3, np.random.default_rng(6).random(200))
    M, I = basis_matrices(b, np.full(5, 0.37))
    assert np.all(M == M[:, :1]) and np.all(I == I[:, :1])
    _, I = basis_matrices(b, [0.0, 1.0])
    assert np.all(I[:, 0] == 0.0)
    np.testing.assert_allclose(I[:, 1], 1.0, atol=1e-12)


@pytest.mark.parametrize("K, d", [(3, 3), (4, 2), (5, 3), (5, 4), (5, 1)])
def test_matches_literal_recursion(K, d):
    b = build_basis(K, d, np.random.default_rng(K * 10 + d).random(300))
    ys = np.r_[np.random.default_rng(7).random(200), b.breakpoints]
    for k in range(K):
        ref = [cox_de_boor_mspline(b.knots, k, d, y) for y in ys]
        np.testing.assert_allclose(mspline_eval(b, k, ys), ref, rtol=1e-10, atol=1e-10)


def test_ispline_derivative_is_mspline():
    b = build_basis(10, 3, np.random.default_rng(8).random(400))
    ys = np.linspace(0.013, 0.987, 97)
    h = 1e-6
    for k in range(10):
        fd = (ispline_eval(b, k, ys + h) - ispline_eval(b, k, ys - h)) / (2 * h)
        m = mspline_eval(b, k, ys)
        big = m > 1e-3
        assert np.all(np.abs(fd[big] - m[big]) / m[big] < 1e-4)


def test_local_derivative_matches_finite_difference():
    b = build_basis(10, 3, np.random.default_rng(9).random(400))
    ys = np.linspace(0.02, 0.98, 41)
    ys = ys[np.min(np.abs(ys[:, None] - b.breakpoints[None, :]), axis=1) > 1e-4]
    j, M, _, dM = local_basis(b, ys, derivative=True)
    h = 1e-7
    jp, Mp, _ = local_basis(b, ys + h)
    jm, Mm, _ = local_basis(b, ys - h)
    assert np.array_equal(jp, j) and np.array_equal(jm, j)
    np.testing.assert_allclose(dM, (Mp - Mm) / (2 * h), rtol=1e-5, atol=1e-4)


def test_index_and_range_errors():
    b = uniform_grid_basis(6, 3)
    with pytest.raises(IndexError):
        mspline_eval(b, 6, 0.5)
    with pytest.raises(ValueError):
        ispline_eval(b, 0, 1.2)


# -- properties ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(3, 20), d=st.integers(1, 4))
def test_convex_mixture_is_a_density(seed, K, d):
    if K < d:
        K = d
    rng = np.random.default_rng(seed)
    b = build_basis(K, d, rng.random(300))
    w = rng.dirichlet(np.ones(K))
    mix = SplineMixture(b, w)
    grid = np.linspace(0.0, 1.0, 2001)
    assert np.all(mix.pdf(grid) >= 0.0)
    assert np.all(np.diff(mix.cdf(grid)) >= -1e-15)
    assert abs(simpson(mix.pdf, b.breakpoints, panels=32) - 1.0) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mixture_quantile_inverts_cdf(seed):
    rng = np.random.default_rng(seed)
    b = build_basis(12, 3, rng.beta(2, 5, 300))
    mix = SplineMixture(b, rng.dirichlet(np.ones(12)))
    tau = rng.uniform(1e-6, 1 - 1e-6, 20)
    np.testing.assert_allclose(mix.cdf(mix.quantile(tau)), tau, atol=1e-10)
