import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from spqrx.simulate import (DESIGNS, SimSpec, TrueModel, beta0, gen_gp_bounded, gen_lognormal,
                            gen_lomax, generate, gp_shape, lomax_alpha)


def test_lognormal_parameters_at_logistic_midpoint():
    X = np.array([[0.5, 0.4, 0.9]])  # x1 x2 = 0.2
    t = TrueModel("lognormal")
    # median is exp(mu) and the 0.84134 level is exp(mu + sigma)
    assert abs(np.log(t.quantile(0.5, X)[0]) - 2.5) < 1e-12
    assert abs(np.log(t.quantile(stats.norm.cdf(1.0), X)[0]) - 3.0) < 1e-12


def test_lognormal_median_is_exp_mu():
    X = np.random.default_rng(0).random((20, 3))
    s = 1 / (1 + np.exp(-(1 - 5 * X[:, 0] * X[:, 1])))
    np.testing.assert_allclose(TrueModel("lognormal").quantile(0.5, X), np.exp(5 * (1 - s)),
                               rtol=1e-13)


def _repeat(x, n):
    return np.tile(np.asarray(x, float), (n, 1))


def test_lognormal_monte_carlo_quantile():
    x = np.array([0.3, 0.7, 0.1])
    t = TrueModel("lognormal")
    rng = np.random.default_rng(1)
    mu, s = 5 * (1 - 1 / (1 + np.exp(-(1 - 5 * 0.21)))), 1 / (1 + np.exp(-(1 - 5 * 0.21)))
    y = np.exp(mu + s * rng.standard_normal(1_000_000))
    q = t.quantile(0.9, x[None, :])[0]
    assert abs(np.quantile(y, 0.9) / q - 1) < 0.005


def test_beta0_examples():
    assert abs(beta0(np.zeros(20))[0] + np.sqrt(2)) < 1e-15
    rng = np.random.default_rng(2)
    X = rng.random((50, 20))
    Y = X.copy()
    Y[:, 10:] = rng.random((50, 10))
    np.testing.assert_array_equal(beta0(X), beta0(Y))
    # x8 also enters the squared term, so swapping x7 and x8 is a symmetry only when x9 = 0
    X[:, 8] = 0.0
    Z = X.copy()
    Z[:, [6, 7]] = X[:, [7, 6]]
    np.testing.assert_allclose(beta0(Z), beta0(X), rtol=1e-14)
    W = rng.random((50, 20))
    V = W.copy()
    V[:, [6, 7]] = W[:, [7, 6]]
    quad = lambda a, b: 0.2 * (a[:, 5] + b * a[:, 8] / 2) ** 2
    np.testing.assert_allclose(beta0(V) - beta0(W), quad(W, W[:, 6]) - quad(W, W[:, 7]),
                               atol=1e-14)
    with pytest.raises(ValueError):
        beta0(np.zeros((1, 9)))


def test_beta0_term_by_term():
    x = np.random.default_rng(3).random(20)
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = x[:10]
    expected = (x2 * x1 + x6 * (1 - np.cos(np.pi * x3 * x4)) + 2 * np.sin(x5) / (abs(x7 - x8) + 2)
                + 0.2 * (x6 + x8 * x9 / 2) ** 2 - np.sqrt(x9 ** 2 + x10 ** 2 + 2))
    assert abs(beta0(x)[0] - expected) < 1e-14


def test_lomax_quantile_examples():
    X = np.random.default_rng(4).random((5, 20))
    t = TrueModel("lomax")
    assert np.all(t.quantile(0.0, X) == 0.0)
    assert np.all(lomax_alpha(X) > 3)
    # alpha = 4 and tau = 1 - 2^-4 give Q = 1; reach alpha = 4 by solving for beta0 = 1
    x = np.zeros(20)
    x[0] = x[1] = np.sqrt(1 + np.sqrt(2))  # x1 x2 = 1 + sqrt2, every other term vanishes
    assert abs(lomax_alpha(x[None, :])[0] - 4.0) < 1e-12
    assert abs(t.quantile(1 - 2.0 ** -4, x[None, :])[0] - 1.0) < 1e-12


def test_lomax_monte_carlo_cdf():
    x = np.random.default_rng(5).random(20)
    t = TrueModel("lomax")
    u = np.random.default_rng(6).random(1_000_000)
    y = t.quantile(u, x[None, :])[0]
    a = lomax_alpha(x[None, :])[0]
    for v in (0.5, 2.0, 10.0):
        emp = np.mean(y <= v)
        assert abs(emp - (1 - (1 + v) ** -a)) < 0.003


def test_bounded_gp_examples():
    data, t = gen_gp_bounded(20_000, seed=7)
    xi = gp_shape(data.X)
    assert np.all((xi > -1) & (xi < 0))
    assert np.all(data.y <= t.upper_endpoint(data.X))
    # the (0.5)^0.5 closed form at xi = -0.5, i.e. beta0 = 0
    expected = (0.5 ** 0.5 - 1) / -0.5
    assert abs(expected - 0.58579) < 1e-5
    x = np.zeros(20)
    x[0] = x[1] = 2.0 ** 0.25  # x1 x2 = sqrt2 cancels the square-root term
    assert abs(gp_shape(x[None, :])[0] + 0.5) < 1e-12
    assert abs(t.quantile(0.5, x[None, :])[0] - expected) < 1e-12
    draws = t.quantile(np.random.default_rng(8).random(1_000_000), x[None, :])[0]
    assert abs(np.median(draws) - expected) < 0.003


@pytest.mark.parametrize("design", sorted(DESIGNS))
def test_quantile_and_cdf_are_inverse(design):
    t = TrueModel(design)
    rng = np.random.default_rng(9)
    X = rng.random((1000, DESIGNS[design]))
    tau = rng.uniform(0.001, 0.999, 1000)
    q = t.quantile(tau[:, None], X)[:, 0]
    np.testing.assert_allclose(t.cdf(q, X), tau, atol=1e-10)


@pytest.mark.parametrize("design", sorted(DESIGNS))
def test_generators_are_seed_deterministic(design):
    a, _ = generate(SimSpec(design, 200, 3))
    b, _ = generate(SimSpec(design, 200, 3))
    c, _ = generate(SimSpec(design, 200, 4))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)
    assert a.X.shape == (200, DESIGNS[design])


def test_halves_with_derived_seeds_agree_in_distribution():
    seeds = np.random.SeedSequence(10).generate_state(2)
    a, _ = gen_lognormal(20_000, int(seeds[0]))
    b, _ = gen_lognormal(20_000, int(seeds[1]))
    assert stats.ks_2samp(np.log(a.y), np.log(b.y)).pvalue > 0.01
    assert abs(np.median(a.y) - np.median(b.y)) < 0.05 * np.median(a.y)


def test_inactive_covariates_have_no_effect():
    data, _ = gen_lognormal(100_000, seed=11)
    logy = np.log(data.y)
    # binned conditional medians of log y against the inactive covariate
    edges = np.quantile(data.X[:, 2], np.linspace(0, 1, 11))
    k = np.clip(np.searchsorted(edges, data.X[:, 2]) - 1, 0, 9)
    mids = np.array([data.X[k == i, 2].mean() for i in range(10)])
    meds = np.array([np.median(logy[k == i]) for i in range(10)])
    fit = stats.linregress(mids, meds)
    assert abs(fit.slope) < 3 * fit.stderr + 1e-12
    active = stats.linregress(data.X[:, 0], logy)
    assert abs(active.slope) > 10 * active.stderr


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2 ** 32 - 1))
def test_lomax_responses_are_positive(n, seed):
    d, _ = gen_lomax(n, seed)
    assert np.all(d.y > 0) and np.all(np.isfinite(d.y))


def test_spec_validation():
    with pytest.raises(ValueError):
        SimSpec("gamma", 10)
    with pytest.raises(ValueError):
        SimSpec("lognormal", 0)
    with pytest.raises(ValueError):
        SimSpec("lomax", 10, p=3)
    assert TrueModel.from_dict(TrueModel("lomax").to_dict()).design == "lomax"
