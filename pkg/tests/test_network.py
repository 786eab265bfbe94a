import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spqrx import _backend
from spqrx.network import (AdamState, NetworkParams, NonFiniteLossError, XiActivation, adam_step,
                           add_xi_output, forward, gradient, init_network, l1_gradient, l1_penalty)
from spqrx.splines import build_basis


def zero_net(p=3, hidden=(4,), K=5, xi=None):
    net = init_network(p, hidden, K, seed=0)
    net = net.with_arrays([np.zeros_like(a) for a in net.arrays()])
    if xi is not None:
        net = add_xi_output(net, xi)
        arrs = net.arrays()
        arrs[-1][0] = 0.0
        net = net.with_arrays(arrs)
    return net


def test_zero_network_outputs():
    _, w = forward(zero_net(), np.ones(3))
    np.testing.assert_allclose(w, 0.2, atol=1e-15)
    xi, w = forward(zero_net(xi=XiActivation("scaled_tanh", -0.5, 0.7)), np.ones(3))
    assert abs(xi - 0.1) < 1e-15


@pytest.mark.parametrize("kind", ["scaled_tanh", "logistic", "exponential"])
def test_random_networks_respect_output_ranges(kind):
    rng = np.random.default_rng(0)
    act = XiActivation.default(kind)
    for i in range(20):
        net = add_xi_output(init_network(3, (8, 8), 7, "relu" if i % 2 else "sigmoid", seed=i), act)
        arrs = [a + rng.normal(0, 0.5, a.shape) for a in net.arrays()]
        xi, w = forward(net.with_arrays(arrs), rng.normal(0, 1, (50, 3)))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((w >= 0) & (w <= 1))
        assert np.all((xi > act.lo) & (xi < act.upper))


def test_softmax_head_has_no_shape_and_is_deterministic():
    net = init_network(2, (5,), 4, seed=1)
    X = np.random.default_rng(2).random((10, 2))
    xi, w = forward(net, X)
    assert xi is None
    assert np.array_equal(w, forward(net, X)[1])


def test_softmax_is_permutation_equivariant():
    net = init_network(2, (5,), 4, seed=3)
    perm = np.array([2, 0, 3, 1])
    arrs = net.arrays()
    arrs[-2], arrs[-1] = arrs[-2][perm], arrs[-1][perm]
    X = np.random.default_rng(4).random((6, 2))
    np.testing.assert_allclose(forward(net.with_arrays(arrs), X)[1], forward(net, X)[1][:, perm],
                               rtol=1e-14)


def test_input_validation():
    net = init_network(3, (4,), 5, seed=0)
    with pytest.raises(ValueError):
        forward(net, np.ones(2))
    with pytest.raises(ValueError):
        forward(net, np.array([1.0, np.nan, 0.0]))


@settings(max_examples=50, deadline=None)
@given(z=st.lists(st.floats(-50, 50), min_size=2, max_size=20),
       lo=st.floats(-2, 0), width=st.floats(0.1, 3))
def test_scaled_tanh_is_increasing_and_bounded(z, lo, width):
    act = XiActivation("scaled_tanh", lo, lo + width)
    z = np.sort(np.asarray(z))
    v = act(z)
    assert np.all((v >= lo) & (v <= lo + width))
    assert np.all(np.diff(v) >= 0)


@pytest.mark.parametrize("kind", ["scaled_tanh", "logistic", "exponential"])
def test_activation_inverse_and_derivative(kind):
    act = XiActivation.default(kind)
    assert abs(act(act.inverse(0.2)) - 0.2) < 1e-14
    z = np.linspace(-3, 3, 13)
    fd = (act(z + 1e-6) - act(z - 1e-6)) / 2e-6
    np.testing.assert_allclose(act.deriv(z), fd, rtol=1e-7)
    assert XiActivation.from_dict(act.to_dict()) == act


def test_xi_init():
    net = add_xi_output(init_network(3, (4,), 5, seed=0), XiActivation(), 0.2)
    xi, _ = forward(net, np.random.default_rng(0).random((7, 3)))
    np.testing.assert_allclose(xi, 0.2, atol=1e-14)


# -- gradients --------------------------------------------------------------------

def _spqrx_loss(basis, y, lam):
    def loss_fn(W, xi):
        nll, pen, dW, dxi = _backend.kernels.spqrx_loss(basis.knots, basis.order, W, xi, y, 0.5,
                                                        0.9, 10.0, 5.0, lam, 64, True)
        return (nll + lam * pen).sum(), dW, dxi
    return loss_fn


def _fd_check(net, X, loss_fn, l1=0.0, rtol=1e-4):
    loss, grads = gradient(net, X, loss_fn, l1=l1)
    vec = net.flatten()
    analytic = np.concatenate([g.ravel() for g in grads])
    e = 1e-6
    for i in range(vec.size):
        vp, vm = vec.copy(), vec.copy()
        vp[i] += e
        vm[i] -= e
        fp = gradient(net.unflatten(vp), X, loss_fn, l1=l1)[0]
        fm = gradient(net.unflatten(vm), X, loss_fn, l1=l1)[0]
        fd = (fp - fm) / (2 * e)
        assert abs(fd - analytic[i]) <= rtol * max(1.0, abs(fd)), (i, fd, analytic[i])
    return loss


@pytest.mark.parametrize("activation", ["sigmoid", "relu"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    basis = build_basis(5, 3, rng.beta(2, 4, 200))
    net = add_xi_output(init_network(3, (4, 4), 5, activation, seed=6), XiActivation())
    net = net.with_arrays([a + rng.normal(0, 0.5, a.shape) for a in net.arrays()])
    X = rng.normal(size=(15, 3))
    y = rng.uniform(0.05, 0.95, 15)
    _fd_check(net, X, _spqrx_loss(basis, y, 2.0), l1=0.01)


def test_softmax_only_gradient():
    rng = np.random.default_rng(7)
    net = init_network(3, (4, 4), 5, seed=8)
    X = rng.normal(size=(10, 3))
    target = rng.dirichlet(np.ones(5), 10)

    def loss_fn(W, xi):
        return float(((W - target) ** 2).sum()), 2 * (W - target), None
    _fd_check(net, X, loss_fn)


def test_constant_loss_has_zero_gradient():
    net = add_xi_output(init_network(3, (4,), 5, seed=0), XiActivation())
    _, grads = gradient(net, np.ones((4, 3)), lambda W, xi: (3.0, np.zeros_like(W), np.zeros(4)))
    assert all(np.all(g == 0) for g in grads)


def test_non_finite_loss_is_signalled():
    net = init_network(3, (4,), 5, seed=0)
    with pytest.raises(NonFiniteLossError):
        gradient(net, np.ones((2, 3)), lambda W, xi: (np.nan, np.zeros_like(W), None))


def test_l1_penalty_examples():
    net = add_xi_output(init_network(1, (2,), 3, seed=0), XiActivation())
    arrs = net.arrays()
    arrs[-2][0] = [1.0, -2.0]
    arrs[-1][0] = 0.5
    net = net.with_arrays(arrs)
    assert abs(l1_penalty(net, 0.1) - 0.35) < 1e-15
    assert l1_penalty(net, 0.0) == 0.0
    assert l1_penalty(init_network(1, (2,), 3, seed=0), 0.1) == 0.0
    g = l1_gradient(net, 0.1)
    np.testing.assert_array_equal(g[-2][0], [0.1, -0.1])
    assert g[-1][0] == 0.1
    assert all(np.all(x == 0) for x in g[:-2]) and np.all(g[-2][1:] == 0) and np.all(g[-1][1:] == 0)
    arrs[-2][0] = 0.0
    arrs[-1][0] = 0.0
    assert l1_penalty(net.with_arrays(arrs), 0.1) == 0.0


# -- Adam ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    net = init_network(2, (3,), 4, seed=0)
    st_ = AdamState.zeros(net)
    st_.m = [np.ones_like(a) for a in st_.m]
    new, st2 = adam_step(st_, net, [np.zeros_like(a) for a in net.arrays()], 1e-3)
    # moments decay; the parameter change comes only from the remembered momentum
    assert all(np.allclose(m, 0.9) for m in st2.m)
    zero = AdamState.zeros(net)
    new, _ = adam_step(zero, net, [np.zeros_like(a) for a in net.arrays()], 1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(new.arrays(), net.arrays()))


def test_adam_first_step_is_lr_times_sign():
    net = init_network(2, (3,), 4, seed=0)
    rng = np.random.default_rng(1)
    grads = [rng.choice([-1.0, 1.0], a.shape) * rng.uniform(0.5, 2.0, a.shape) for a in net.arrays()]
    new, _ = adam_step(AdamState.zeros(net), net, grads, 0.01)
    for a, b, g in zip(new.arrays(), net.arrays(), grads):
        np.testing.assert_allclose(a - b, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_minimizes_quadratic():
    net = init_network(2, (3,), 4, seed=0)
    rng = np.random.default_rng(2)
    target = [rng.normal(size=a.shape) for a in net.arrays()]
    state = AdamState.zeros(net)
    for _ in range(2000):
        grads = [2 * (a - t) for a, t in zip(net.arrays(), target)]
        net, state = adam_step(state, net, grads, 0.05 if state.t < 1500 else 0.001)
    assert max(np.max(np.abs(a - t)) for a, t in zip(net.arrays(), target)) < 1e-4


def test_adam_rejects_bad_gradients():
    net = init_network(2, (3,), 4, seed=0)
    bad = [np.full_like(a, np.inf) for a in net.arrays()]
    with pytest.raises(NonFiniteLossError):
        adam_step(AdamState.zeros(net), net, bad, 1e-3)


def test_params_round_trip():
    net = add_xi_output(init_network(3, (4, 2), 5, "relu", seed=0), XiActivation.default("exponential"))
    back = NetworkParams.from_dict(net.to_dict())
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), back.arrays()))
    assert back.xi_activation == net.xi_activation and back.activation == "relu"
    assert np.array_equal(net.unflatten(net.flatten()).flatten(), net.flatten())
