"""Multi-layer perceptron with a softmax head and an optional shape output.

The network maps covariates ``x`` to mixture weights ``w(x)`` (softmax of the
last ``K`` outputs) and, in ``"softmax_xi"`` head mode, to a tail shape
``xi(x)`` obtained from output 0 through a bounded activation.  Gradients are
hand-written reverse mode; the loss is supplied as a callback that returns its
value together with gradients with respect to the weights and shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "XiActivation",
    "NetworkParams",
    "AdamState",
    "NonFiniteLossError",
    "init_network",
    "add_xi_output",
    "forward",
    "gradient",
    "adam_step",
    "l1_penalty",
    "l1_gradient",
]

HIDDEN = ("sigmoid", "relu")
HEADS = ("softmax", "softmax_xi")


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss or gradient evaluates to nan or inf."""


@dataclass(frozen=True)
class XiActivation:
    """Map from a real pre-activation to the admissible shape range.

    ``scaled_tanh``: ``lo + (hi - lo) (tanh(z) + 1) / 2`` onto ``(lo, hi)``.
    ``logistic``: ``lo + (hi - lo) / (1 + exp(-z))`` onto ``(lo, hi)``.
    ``exponential``: ``lo + exp(z)`` onto ``(lo, inf)``; ``hi`` is ignored.
    """

    kind: str = "scaled_tanh"
    lo: float = -0.5
    hi: float = 0.7

    def __post_init__(self):
        if self.kind not in ("scaled_tanh", "logistic", "exponential"):
            raise ValueError(f"unknown xi activation {self.kind!r}")
        if self.kind != "exponential" and not self.lo < self.hi:
            raise ValueError("xi activation needs lo < hi")

    @classmethod
    def default(cls, kind: str) -> "XiActivation":
        if kind == "logistic":
            return cls("logistic", 0.0, 1.0)
        if kind == "exponential":
            return cls("exponential", 0.0, math.inf)
        return cls("scaled_tanh", -0.5, 0.7)

    @property
    def upper(self) -> float:
        return math.inf if self.kind == "exponential" else self.hi

    def __call__(self, z):
        z = np.asarray(z, float)
        if self.kind == "scaled_tanh":
            return self.lo + (self.hi - self.lo) * 0.5 * (np.tanh(z) + 1.0)
        if self.kind == "logistic":
            return self.lo + (self.hi - self.lo) * _sigmoid(z)
        return self.lo + np.exp(z)

    def deriv(self, z):
        z = np.asarray(z, float)
        if self.kind == "scaled_tanh":
            return 0.5 * (self.hi - self.lo) * (1.0 - np.tanh(z) ** 2)
        if self.kind == "logistic":
            s = _sigmoid(z)
            return (self.hi - self.lo) * s * (1.0 - s)
        return np.exp(z)

    def inverse(self, xi: float) -> float:
        if not self.lo < xi < self.upper:
            raise ValueError(f"xi={xi} outside activation range ({self.lo}, {self.upper})")
        if self.kind == "scaled_tanh":
            return float(np.arctanh(2.0 * (xi - self.lo) / (self.hi - self.lo) - 1.0))
        if self.kind == "logistic":
            r = (xi - self.lo) / (self.hi - self.lo)
            return math.log(r / (1.0 - r))
        return math.log(xi - self.lo)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": None if self.kind == "exponential" else self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "XiActivation":
        hi = math.inf if d.get("hi") is None else float(d["hi"])
        return cls(d["kind"], float(d["lo"]), hi)


def _sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class NetworkParams:
    """Layer weights ``weights[h]`` (n_h x n_{h-1}) and ``biases[h]`` (n_h)."""

    weights: list
    biases: list
    activation: str = "sigmoid"
    head: str = "softmax"
    xi_activation: Optional[XiActivation] = None

    def __post_init__(self):
        if self.activation not in HIDDEN:
            raise ValueError(f"hidden activation must be one of {HIDDEN}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix")
        for h, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {h}: bias shape does not match weights")
            if h and W.shape[1] != self.weights[h - 1].shape[0]:
                raise ValueError(f"layer {h}: input size does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {h}: non-finite parameters")
        if self.head == "softmax_xi":
            if self.xi_activation is None:
                raise ValueError("softmax_xi head needs an xi activation")
            if self.weights[-1].shape[0] < 2:
                raise ValueError("softmax_xi head needs at least one mixture output")

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_basis(self) -> int:
        return self.weights[-1].shape[0] - (self.head == "softmax_xi")

    @property
    def has_xi(self) -> bool:
        return self.head == "softmax_xi"

    def arrays(self) -> list:
        """Parameter arrays in a fixed order (W_1, b_1, W_2, b_2, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def with_arrays(self, arrays) -> "NetworkParams":
        arrays = list(arrays)
        return NetworkParams([np.array(a, float) for a in arrays[0::2]],
                             [np.array(a, float) for a in arrays[1::2]],
                             self.activation, self.head, self.xi_activation)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec) -> "NetworkParams":
        vec = np.asarray(vec, float)
        out, i = [], 0
        for a in self.arrays():
            out.append(vec[i:i + a.size].reshape(a.shape))
            i += a.size
        return self.with_arrays(out)

    def copy(self) -> "NetworkParams":
        return self.with_arrays(self.arrays())

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "head": self.head,
            "xi_activation": None if self.xi_activation is None else self.xi_activation.to_dict(),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        xa = d.get("xi_activation")
        return cls([np.array(W, float).reshape(len(W), -1) for W in d["weights"]],
                   [np.array(b, float) for b in d["biases"]],
                   d["activation"], d["head"],
                   None if xa is None else XiActivation.from_dict(xa))


def init_network(n_inputs: int, hidden, n_basis: int, activation: str = "sigmoid",
                 seed=None) -> NetworkParams:
    """Glorot-uniform weights, zero biases, softmax head with ``n_basis`` outputs."""
    if n_inputs < 1 or n_basis < 1:
        raise ValueError("need at least one input and one output")
    rng = np.random.default_rng(seed)
    sizes = [int(n_inputs), *[int(h) for h in hidden], int(n_basis)]
    if any(s < 1 for s in sizes):
        raise ValueError("layer sizes must be positive")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, activation, "softmax", None)


def add_xi_output(params: NetworkParams, xi_activation: XiActivation,
                  xi_init: float = 0.2) -> NetworkParams:
    """Prepend a shape output with zero weights and a bias giving ``xi = xi_init``.

    If ``xi_init`` lies outside the activation range the midpoint of the range
    (or ``lo + 1`` for the exponential map) is used instead.
    """
    if params.has_xi:
        raise ValueError("network already has an xi output")
    if not xi_activation.lo < xi_init < xi_activation.upper:
        xi_init = (xi_activation.lo + 1.0 if xi_activation.kind == "exponential"
                   else 0.5 * (xi_activation.lo + xi_activation.hi))
    W, b = params.weights[-1], params.biases[-1]
    W = np.vstack([np.zeros((1, W.shape[1])), W])
    b = np.concatenate([[xi_activation.inverse(xi_init)], b])
    return NetworkParams([*[w.copy() for w in params.weights[:-1]], W],
                         [*[c.copy() for c in params.biases[:-1]], b],
                         params.activation, "softmax_xi", xi_activation)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(params: NetworkParams, X):
    X = np.asarray(X, float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.n_inputs:
        raise ValueError(f"expected {params.n_inputs} covariates, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates must be finite")
    return X, single


def _forward(params: NetworkParams, X):
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        if i == last:
            return acts, z
        h = _sigmoid(z) if params.activation == "sigmoid" else np.maximum(z, 0.0)
        acts.append(h)


def forward(params: NetworkParams, X):
    """Evaluate the network.

    Parameters
    ----------
    params : NetworkParams
    X : array_like, shape (p,) or (n, p)

    Returns
    -------
    xi : ndarray or float or None
        Shape output; ``None`` for the softmax-only head.
    weights : ndarray, shape (K,) or (n, K)
    """
    X, single = _check_input(params, X)
    _, z = _forward(params, X)
    if params.has_xi:
        xi = params.xi_activation(z[:, 0])
        w = _softmax(z[:, 1:])
    else:
        xi, w = None, _softmax(z)
    if single:
        return (None if xi is None else float(xi[0])), w[0]
    return xi, w


LossFn = Callable[[np.ndarray, Optional[np.ndarray]], tuple]


def gradient(params: NetworkParams, X, loss_fn: LossFn, l1: float = 0.0):
    """Loss and its gradient with respect to every parameter array.

    ``loss_fn(weights, xi)`` must return ``(loss, d_weights, d_xi)``; ``d_xi``
    is ignored (and ``xi`` is ``None``) for the softmax-only head.  ``l1`` adds
    :func:`l1_penalty` to the loss.  Returns ``(loss, grads)`` with ``grads``
    ordered like :meth:`NetworkParams.arrays`.

    Raises
    ------
    NonFiniteLossError
        If the loss or any gradient entry is not finite.
    """
    X, _ = _check_input(params, X)
    acts, z = _forward(params, X)
    if params.has_xi:
        w = _softmax(z[:, 1:])
        xi = params.xi_activation(z[:, 0])
    else:
        w, xi = _softmax(z), None
    loss, dw, dxi = loss_fn(w, xi)
    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss}")
    dw = np.asarray(dw, float)
    dz_w = w * (dw - (dw * w).sum(axis=1, keepdims=True))
    if params.has_xi:
        dz = np.empty_like(z)
        dz[:, 0] = np.asarray(dxi, float) * params.xi_activation.deriv(z[:, 0])
        dz[:, 1:] = dz_w
    else:
        dz = dz_w
    grads = []
    for i in range(len(params.weights) - 1, -1, -1):
        W = params.weights[i]
        h = acts[i]
        grads.append(dz.sum(axis=0))
        grads.append(dz.T @ h)
        if i == 0:
            break
        dh = dz @ W
        if params.activation == "sigmoid":
            dz = dh * h * (1.0 - h)
        else:
            dz = dh * (h > 0)
    grads = grads[::-1]
    if l1 > 0:
        loss += l1_penalty(params, l1)
        grads = [g + e for g, e in zip(grads, l1_gradient(params, l1))]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteLossError("gradient has non-finite entries")
    return loss, grads


def l1_penalty(params: NetworkParams, coefficient: float) -> float:
    """``coefficient`` times the absolute sum of the shape-output row and its bias."""
    if coefficient < 0:
        raise ValueError("L1 coefficient must be nonnegative")
    if not params.has_xi or coefficient == 0:
        return 0.0
    return float(coefficient * (np.abs(params.weights[-1][0]).sum() + abs(params.biases[-1][0])))


def l1_gradient(params: NetworkParams, coefficient: float) -> list:
    """Subgradient of :func:`l1_penalty` (zero at zero) in :meth:`arrays` order."""
    grads = [np.zeros_like(a) for a in params.arrays()]
    if params.has_xi and coefficient > 0:
        grads[-2][0] = coefficient * np.sign(params.weights[-1][0])
        grads[-1][0] = coefficient * np.sign(params.biases[-1][0])
    return grads


@dataclass
class AdamState:
    """First and second moment estimates and the step count."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: NetworkParams, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, **kw)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t,
                         self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: NetworkParams, grads, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteLossError("gradient has non-finite entries")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [a - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
           for a, mi, vi in zip(arrays, m, v)]
    return params.with_arrays(new), AdamState(m, v, t, b1, b2, state.eps)
