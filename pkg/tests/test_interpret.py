import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spqrx.interpret import (DEFAULT_TAUS, ale, ale_quantile, ale_xi, vi_quantile_profile,
                             vi_score, vi_xi)
from spqrx.network import XiActivation

from test_regression import make_model


@pytest.fixture(scope="module")
def X():
    return np.random.default_rng(0).random((2000, 3))


def test_constant_function_has_zero_effect(X):
    prof = ale(lambda Z: np.full(Z.shape[0], 3.0), X, 0)
    assert np.all(prof.effects == 0.0)
    assert vi_score(prof, X[:, 0])[0] == 0.0


def test_function_of_other_columns_has_exactly_zero_effect(X):
    prof = ale(lambda Z: np.sin(Z[:, 1]) * Z[:, 2] ** 3, X, 0)
    assert np.all(prof.effects == 0.0)


def test_identity_recovers_centered_covariate(X):
    prof = ale(lambda Z: Z[:, 1], X, 1)
    np.testing.assert_allclose(prof.effects[:, 0], prof.edges - X[:, 1].mean(), atol=1e-12)
    assert np.all(np.diff(prof.edges) > 0)
    assert prof.effects.shape == (prof.edges.size, 1)


def test_square_matches_monte_carlo_oracle():
    Z = np.random.default_rng(1).random((100_000, 2))
    prof = ale(lambda A: A[:, 0] ** 2, Z, 0, bins=40)
    oracle = prof.edges ** 2 - np.mean(Z[:, 0] ** 2)
    assert np.max(np.abs(prof.effects[:, 0] - oracle)) < 0.02


def test_uncentered_profile_starts_at_zero(X):
    prof = ale(lambda Z: Z[:, 0] ** 2 + Z[:, 1], X, 0)
    np.testing.assert_allclose(prof.effects[0] + prof.offset, 0.0, atol=1e-15)


def test_linear_profile_on_uniform_has_sd_one_over_sqrt12():
    x = np.random.default_rng(2).random((50_000, 1))
    prof = ale(lambda Z: Z[:, 0], x, 0)
    assert abs(vi_score(prof, x[:, 0])[0] - 1 / np.sqrt(12)) < 0.005


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-1e3, 1e3))
def test_vi_is_shift_invariant(c):
    X = np.random.default_rng(3).random((500, 2))
    g = lambda Z: np.exp(Z[:, 0]) + Z[:, 1]
    v0 = vi_score(ale(g, X, 0), X[:, 0])
    v1 = vi_score(ale(lambda Z: g(Z) + c, X, 0), X[:, 0])
    np.testing.assert_allclose(v1, v0, rtol=1e-9, atol=1e-9)


def test_vi_stable_when_doubling_bins(X):
    g = lambda Z: np.sin(3 * Z[:, 0]) + Z[:, 1]
    v40 = vi_score(ale(g, X, 0, bins=40), X[:, 0])[0]
    v80 = vi_score(ale(g, X, 0, bins=80), X[:, 0])[0]
    assert abs(v80 - v40) < 0.05 * v40


def test_vi_invariant_to_monotone_relabeling_of_other_columns(X):
    g = lambda Z: Z[:, 0] * Z[:, 1]
    h = lambda Z: Z[:, 0] * np.log(Z[:, 1])
    Y = X.copy()
    Y[:, 1] = np.exp(X[:, 1])
    np.testing.assert_allclose(vi_score(ale(g, X, 0), X[:, 0]), vi_score(ale(h, Y, 0), Y[:, 0]),
                               rtol=1e-10)


def test_tied_and_empty_bins_are_merged():
    x = np.r_[np.zeros(50), np.ones(50), np.linspace(2, 3, 10)][:, None]
    prof = ale(lambda Z: 2 * Z[:, 0], x, 0, bins=40)
    assert np.all(np.diff(prof.edges) > 0)
    assert np.all(np.isfinite(prof.effects))
    np.testing.assert_allclose(prof.effects[:, 0], 2 * (prof.edges - x.mean()), atol=1e-12)


def test_ale_argument_errors(X):
    with pytest.raises(ValueError):
        ale(lambda Z: Z[:, 0], X, 0, bins=1)
    with pytest.raises(ValueError):
        ale(lambda Z: Z[:, 0], np.ones((10, 1)), 0)
    with pytest.raises(IndexError):
        ale(lambda Z: Z[:, 0], X, 5)


def test_zero_network_gives_zero_importance(X):
    m = make_model("spqrx", p=3, zero=True)
    res = vi_quantile_profile(m, X[:300], taus=[0.1, 0.5, 0.9], bins=10)
    assert res.scores.shape == (3, 3)
    assert np.all(res.scores == 0.0)


def test_quantile_profile_uses_default_grid(X):
    m = make_model("spqr", p=3)
    res = vi_quantile_profile(m, X[:200], taus=[], bins=8)
    np.testing.assert_array_equal(res.taus, DEFAULT_TAUS)
    assert res.scores.shape == (len(DEFAULT_TAUS), 3)
    assert np.all(res.scores >= 0)
    prof = ale_quantile(m, X[:200], 0, taus=[0.5], bins=8)
    np.testing.assert_allclose(vi_score(prof, X[:200, 0]), res.scores[DEFAULT_TAUS.index(0.5), 0],
                               rtol=1e-12)


def test_shape_importance_requires_tail_model(X):
    with pytest.raises(ValueError):
        vi_xi(make_model("spqr", p=3), X[:100])
    with pytest.raises(ValueError):
        ale_xi(make_model("spqr", p=3), X[:100], 0)


def test_constant_shape_gives_zero_importance(X):
    from dataclasses import replace
    m = make_model("spqrx", p=3, kind="logistic")
    # add_xi_output starts the shape row of the last layer at zero
    assert np.ptp(m.xi(X)) == 0.0
    assert np.all(vi_xi(m, X[:300], bins=10).scores == 0.0)
    arrays = m.network.arrays()
    W_last = arrays[-2].copy()
    W_last[0] = np.random.default_rng(4).normal(size=W_last.shape[1])
    m1 = replace(m, network=m.network.with_arrays(arrays[:-2] + [W_last, arrays[-1]]))
    assert np.all(vi_xi(m1, X[:300], bins=10).scores > 0.0)
