"""Conditional density models and their training pipeline.

Two model modes share one network:

* ``"spqr"``: ``f(y | x) = sum_k w_k(x) M_k(y)`` on the min-max scaled response.
* ``"spqrx"``: the SPQR density is blended into a generalized Pareto tail whose
  shape ``xi(x)`` is an extra network output and whose threshold and scale are
  matched to the bulk quantiles ``a(x) = Q(p_a | x)`` and ``b(x) = Q(p_b | x)``.

Training minimizes the mean negative log-likelihood (plus the validity penalty
and an L1 term on the shape output for ``spqrx``) with Adam, checkpointing on a
held-out validation split and stopping after ``patience`` epochs without
improvement.  Non-finite losses trigger a restart from the last finite state
with a reduced learning rate.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend
from .distributions import BlendSpec
from .network import (AdamState, NetworkParams, NonFiniteLossError, XiActivation,
                      adam_step, add_xi_output, forward, gradient, init_network,
                      l1_penalty)
from .splines import SplineBasis, basis_matrices, build_basis

__all__ = [
    "ResponseScaling",
    "CovariateScaling",
    "Dataset",
    "Architecture",
    "TrainingConfig",
    "FittedModel",
    "TrainingError",
    "scale_response",
    "unscale_response",
    "normalize_covariates",
    "spqr_density",
    "spqr_cdf",
    "spqr_quantile",
    "spqrx_density",
    "spqrx_cdf",
    "spqrx_quantile",
    "nll_loss",
    "fit_spqr",
    "fit_spqrx",
    "grid_search",
]

# SPQR has compact support on the training range; beyond this level the
# quantile is pinned to the training maximum and is refused.
SPQR_MAX_TAU = 0.999


class TrainingError(RuntimeError):
    """Training could not produce a finite loss within the restart budget."""


# ---------------------------------------------------------------------------
# Scaling


@dataclass(frozen=True)
class ResponseScaling:
    """Min-max map of the (optionally square-rooted) response onto [0, 1]."""

    lo: float
    hi: float
    sqrt: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.hi > self.lo):
            raise ValueError("response scaling needs finite lo < hi")

    @classmethod
    def fit(cls, y, sqrt: bool = False) -> "ResponseScaling":
        v = _pre(np.asarray(y, float), sqrt)
        return cls(float(v.min()), float(v.max()), sqrt)

    def transform(self, y):
        return (_pre(np.asarray(y, float), self.sqrt) - self.lo) / (self.hi - self.lo)

    def inverse(self, s):
        v = self.lo + np.asarray(s, float) * (self.hi - self.lo)
        return v * v if self.sqrt else v

    def log_jacobian(self, y):
        """``log |ds/dy|`` for converting scaled densities to the original scale."""
        y = np.asarray(y, float)
        out = np.full(y.shape, -math.log(self.hi - self.lo))
        if self.sqrt:
            with np.errstate(divide="ignore"):
                out = out - np.log(2.0 * np.sqrt(y))
        return out

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "sqrt": self.sqrt}

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseScaling":
        return cls(float(d["lo"]), float(d["hi"]), bool(d["sqrt"]))


def _pre(y, sqrt):
    if sqrt:
        if np.any(y < 0):
            raise ValueError("square-root transform needs nonnegative responses")
        return np.sqrt(y)
    return y


@dataclass(frozen=True)
class CovariateScaling:
    """Column means and standard deviations of the training covariates."""

    mean: tuple
    sd: tuple

    @classmethod
    def fit(cls, X) -> "CovariateScaling":
        X = np.asarray(X, float)
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        const = sd == 0
        if np.any(const):
            warnings.warn(f"constant covariate columns {np.flatnonzero(const).tolist()} "
                          "are centered but not scaled", stacklevel=2)
            sd = np.where(const, 1.0, sd)
        return cls(tuple(mean.tolist()), tuple(sd.tolist()))

    def transform(self, X):
        X = np.asarray(X, float)
        if X.shape[-1] != len(self.mean):
            raise ValueError(f"expected {len(self.mean)} covariates, got {X.shape[-1]}")
        return (X - np.asarray(self.mean)) / np.asarray(self.sd)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "sd": list(self.sd)}

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateScaling":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["sd"]))


def scale_response(ys, scaling: ResponseScaling):
    return scaling.transform(ys)


def unscale_response(s, scaling: ResponseScaling):
    return scaling.inverse(s)


def normalize_covariates(X, stats: CovariateScaling):
    return stats.transform(X)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``X`` (n x p) and positive responses ``y`` (n)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, float)
        y = np.asarray(self.y, float).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, p) with one response per row")
        if y.size == 0:
            raise ValueError("empty dataset")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("data must be finite")
        if np.any(y <= 0):
            raise ValueError("responses must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows])


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class Architecture:
    """Spline basis size and order, hidden layers and activations."""

    num_basis: int = 25
    order: int = 3
    hidden: tuple = (32,)
    activation: str = "sigmoid"
    xi_activation: XiActivation = field(default_factory=XiActivation)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.order < 1 or self.num_basis < self.order:
            raise ValueError("need order >= 1 and num_basis >= order")

    def to_dict(self) -> dict:
        return {"num_basis": self.num_basis, "order": self.order, "hidden": list(self.hidden),
                "activation": self.activation, "xi_activation": self.xi_activation.to_dict()}


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer, early stopping, penalty and restart settings.

    ``batch_size=None`` trains on the full training split each step.
    """

    lr: float = 1e-3
    max_epochs: int = 1000
    patience: int = 25
    val_fraction: float = 0.2
    lam: float = 100.0
    l1: float = 1e-4
    seed: int = 0
    batch_size: Optional[int] = None
    lr_decay: float = 0.5
    max_restarts: int = 5
    grid_size: int = 128
    xi_init: float = 0.2

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")
        if self.lam < 0 or self.l1 < 0:
            raise ValueError("penalty coefficients must be nonnegative")
        if not self.lr > 0 or self.max_epochs < 0:
            raise ValueError("need lr > 0 and max_epochs >= 0")
        if not 0.0 < self.lr_decay < 1.0 or self.max_restarts < 0:
            raise ValueError("need lr_decay in (0, 1) and max_restarts >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Fitted model


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A trained network together with everything needed to predict.

    The module-level ``spqr_*``/``spqrx_*`` functions work on the scaled
    response; the ``pdf``/``cdf``/``quantile`` methods use original units.
    """

    mode: str
    basis: SplineBasis
    network: NetworkParams
    response_scaling: ResponseScaling
    covariate_scaling: CovariateScaling
    blend: Optional[BlendSpec] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("spqr", "spqrx"):
            raise ValueError("mode must be 'spqr' or 'spqrx'")
        if self.network.n_basis != self.basis.num_basis:
            raise ValueError("network outputs do not match the basis size")
        if self.mode == "spqrx" and (self.blend is None or not self.network.has_xi):
            raise ValueError("spqrx mode needs a blend spec and an xi output")

    @property
    def n_inputs(self) -> int:
        return self.network.n_inputs

    def outputs(self, X):
        """Shape (or ``None``) and mixture weights for raw covariates ``X`` (n x p)."""
        X = np.atleast_2d(np.asarray(X, float))
        xi, W = forward(self.network, self.covariate_scaling.transform(X))
        return xi, W

    def xi(self, X) -> np.ndarray:
        if self.mode != "spqrx":
            raise ValueError("SPQR models have no shape function")
        return self.outputs(X)[0]

    def blend_geometry(self, X):
        """Scaled ``(a, b, u_tilde, sigma_tilde, xi)`` per row."""
        if self.mode != "spqrx":
            raise ValueError("SPQR models have no tail geometry")
        xi, W = self.outputs(X)
        B, s = self.basis, self.blend
        a, b, u, sig = _backend.kernels.blend_geometry(B.knots, B.order, W, xi, s.p_a, s.p_b)
        return a, b, u, sig, xi

    def pdf(self, X, y):
        """Conditional density at original-scale ``y`` ((n,) or (n, m))."""
        y, flat = _rows(y, X)
        dens = _density(self, X, self.response_scaling.transform(y))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(dens > 0, dens * np.exp(self.response_scaling.log_jacobian(y)), dens)
        return out[:, 0] if flat else out

    def cdf(self, X, y):
        y, flat = _rows(y, X)
        out = _cdf(self, X, self.response_scaling.transform(y))
        return out[:, 0] if flat else out

    def quantile(self, X, tau):
        """Conditional quantiles: scalar ``tau`` gives (n,), a list gives (n, m)."""
        tau = np.asarray(tau, float)
        flat = tau.ndim == 0
        tau = np.atleast_1d(tau)
        if np.any((tau <= 0) | (tau >= 1)):
            raise ValueError("tau must lie in (0, 1)")
        if self.mode == "spqr" and np.any(tau > SPQR_MAX_TAU):
            raise ValueError(
                f"SPQR has compact support ending at the training maximum; quantiles above "
                f"tau={SPQR_MAX_TAU} cannot extrapolate (fit an spqrx model instead)")
        X = np.atleast_2d(np.asarray(X, float))
        T = np.broadcast_to(tau, (X.shape[0], tau.size))
        Q = self.response_scaling.inverse(_quantile(self, X, T))
        return Q[:, 0] if flat else Q

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "basis": self.basis.to_dict(),
            "network": self.network.to_dict(),
            "blend": None if self.blend is None else self.blend.to_dict(),
            "response_scaling": self.response_scaling.to_dict(),
            "covariate_scaling": self.covariate_scaling.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        blend = d.get("blend")
        return cls(
            mode=d["mode"],
            basis=SplineBasis.from_dict(d["basis"]),
            network=NetworkParams.from_dict(d["network"]),
            response_scaling=ResponseScaling.from_dict(d["response_scaling"]),
            covariate_scaling=CovariateScaling.from_dict(d["covariate_scaling"]),
            blend=None if blend is None else BlendSpec(**blend),
            metadata=dict(d.get("metadata", {})),
        )


def _rows(y, X):
    n = np.atleast_2d(np.asarray(X, float)).shape[0]
    y = np.asarray(y, float)
    flat = y.ndim <= 1
    if y.ndim == 0:
        y = np.full(n, float(y))
    y = y.reshape(n, -1) if flat else y
    if y.shape[0] != n:
        raise ValueError("need one row of responses per covariate row")
    return y, flat


def _weights(model, X):
    xi, W = model.outputs(X)
    return xi, W


def _density(model, X, s):
    xi, W = _weights(model, X)
    B, k = model.basis, _backend.kernels
    if model.mode == "spqr":
        return k.bulk_eval(B.knots, B.order, W, s)[1]
    b = model.blend
    return k.bgp_eval(B.knots, B.order, W, xi, s, b.p_a, b.p_b, b.c1, b.c2)[3]


def _cdf(model, X, s):
    xi, W = _weights(model, X)
    B, k = model.basis, _backend.kernels
    if model.mode == "spqr":
        return k.bulk_eval(B.knots, B.order, W, s)[0]
    b = model.blend
    return k.bgp_eval(B.knots, B.order, W, xi, s, b.p_a, b.p_b, b.c1, b.c2)[0]


def _quantile(model, X, T):
    xi, W = _weights(model, X)
    B, k = model.basis, _backend.kernels
    if model.mode == "spqr":
        return k.spqr_quantile(B.knots, B.order, W, T)
    b = model.blend
    return k.bgp_quantile(B.knots, B.order, W, xi, T, b.p_a, b.p_b, b.c1, b.c2)


def _scaled_args(model, X, v):
    X = np.atleast_2d(np.asarray(X, float))
    v, flat = _rows(v, X)
    return X, v, flat


# Scaled-response API: ``X`` holds raw covariates, ``y``/``tau`` are (n,) or (n, m).


def spqr_density(model: FittedModel, X, y):
    """Bulk density ``sum_k w_k(x) M_k(y)`` at scaled ``y``."""
    X, y, flat = _scaled_args(model, X, y)
    _, W = _weights(model, X)
    out = _backend.kernels.bulk_eval(model.basis.knots, model.basis.order, W, y)[1]
    return out[:, 0] if flat else out


def spqr_cdf(model: FittedModel, X, y):
    """Bulk distribution function ``sum_k w_k(x) I_k(y)`` at scaled ``y``."""
    X, y, flat = _scaled_args(model, X, y)
    _, W = _weights(model, X)
    out = _backend.kernels.bulk_eval(model.basis.knots, model.basis.order, W, y)[0]
    return out[:, 0] if flat else out


def spqr_quantile(model: FittedModel, X, tau):
    """Bulk quantile in [0, 1]; ``tau = 0`` gives 0 and ``tau = 1`` gives 1."""
    X, tau, flat = _scaled_args(model, X, tau)
    _, W = _weights(model, X)
    out = _backend.kernels.spqr_quantile(model.basis.knots, model.basis.order, W, tau)
    return out[:, 0] if flat else out


def _need_x(model):
    if model.mode != "spqrx":
        raise ValueError("this operation needs an spqrx model")


def spqrx_density(model: FittedModel, X, y):
    """Blended GP density at scaled ``y`` (which may exceed 1)."""
    _need_x(model)
    X, y, flat = _scaled_args(model, X, y)
    out = _density(model, X, y)
    return out[:, 0] if flat else out


def spqrx_cdf(model: FittedModel, X, y):
    _need_x(model)
    X, y, flat = _scaled_args(model, X, y)
    out = _cdf(model, X, y)
    return out[:, 0] if flat else out


def spqrx_quantile(model: FittedModel, X, tau):
    _need_x(model)
    X, tau, flat = _scaled_args(model, X, tau)
    out = _quantile(model, X, tau)
    return out[:, 0] if flat else out


def nll_loss(model: FittedModel, X, y, lam: Optional[float] = None, l1: float = 0.0,
             grid_size: int = 128, scaled: bool = False) -> float:
    """Summed negative log-likelihood on the scaled response scale.

    For ``spqrx`` the validity penalty ``lam * sum_i pen_i`` and the L1 term are
    added; ``lam`` defaults to the value recorded at training time (or 0).
    Non-finite values are returned as is so callers can react to them.
    """
    X = np.atleast_2d(np.asarray(X, float))
    s = np.asarray(y, float) if scaled else model.response_scaling.transform(y)
    xi, W = _weights(model, X)
    B = model.basis
    if model.mode == "spqr":
        F, f = _backend.kernels.bulk_eval(B.knots, B.order, W, s[:, None])
        with np.errstate(divide="ignore"):
            return float(-np.log(f[:, 0]).sum())
    if lam is None:
        lam = float(model.metadata.get("config", {}).get("lam", 0.0))
    b = model.blend
    nll, pen, _, _ = _backend.kernels.spqrx_loss(B.knots, B.order, W, xi, s, b.p_a, b.p_b,
                                                 b.c1, b.c2, lam, grid_size, False)
    return float(nll.sum() + lam * pen.sum() + l1_penalty(model.network, l1))


# ---------------------------------------------------------------------------
# Training


def _split(n: int, frac: float, seed) -> tuple:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(frac * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _spqr_rows_loss(Mrows):
    """Mean negative log of ``w . M`` for precomputed basis rows."""
    def loss_fn(W, xi):
        f = (W * Mrows).sum(axis=1)
        n = f.shape[0]
        with np.errstate(divide="ignore"):
            loss = -np.log(f).mean()
        return loss, -Mrows / (f[:, None] * n), None
    return loss_fn


def _spqrx_rows_loss(basis, blend, y, lam, grid_size):
    def loss_fn(W, xi):
        nll, pen, dW, dxi = _backend.kernels.spqrx_loss(
            basis.knots, basis.order, W, xi, y, blend.p_a, blend.p_b, blend.c1, blend.c2,
            lam, grid_size, True)
        n = y.shape[0]
        loss = (nll.sum() + lam * pen.sum()) / n
        return loss, dW / n, dxi / n
    return loss_fn


def _train(params: NetworkParams, Xtr, Xva, make_loss: Callable, val_loss: Callable,
           config: TrainingConfig, l1: float, rng: np.random.Generator, log=None):
    """Adam with per-epoch checkpoints, early stopping and restarts.

    A non-finite training loss rolls back to the iterate before the last step
    and decays the learning rate.

    ``make_loss(rows)`` returns a loss callback for a batch of training rows and
    ``val_loss(params)`` the validation objective.
    """
    n = Xtr.shape[0]
    bs = n if config.batch_size is None else min(config.batch_size, n)
    state = AdamState.zeros(params)
    lr = config.lr
    restarts = 0
    v0 = val_loss(params)
    if not math.isfinite(v0):
        raise TrainingError("initial validation loss is not finite")
    best = (v0, params, 0)
    history = [{"epoch": 0, "train_loss": math.nan, "val_loss": v0, "restarts": 0, "lr": lr}]
    since = 0
    epoch = 0
    # (params, state) before the step that produced the current iterate
    prev = (params, state)
    while epoch < config.max_epochs:
        epoch += 1
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        start = 0
        while start < n:
            rows = order[start:start + bs]
            try:
                loss, grads = gradient(params, Xtr[rows], make_loss(rows), l1=l1)
            except NonFiniteLossError:
                restarts += 1
                if restarts > config.max_restarts:
                    raise TrainingError(f"non-finite loss after {config.max_restarts} "
                                        f"restarts (last lr={lr:g})") from None
                params, state = prev
                lr *= config.lr_decay
                if log:
                    log(f"epoch {epoch}: non-finite loss, restart {restarts} with lr={lr:g}")
                continue
            prev = (params, state)
            params, state = adam_step(state, params, grads, lr)
            total += loss * rows.size
            start += bs
        # an iterate can be finite on training rows yet place a validation
        # response beyond its upper endpoint; that only counts as no improvement
        v = val_loss(params)
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": v,
                        "restarts": restarts, "lr": lr})
        if log:
            log(f"epoch {epoch}: train {total / n:.6f} val {v:.6f}")
        if v < best[0]:
            best = (v, params, epoch)
            since = 0
        else:
            since += 1
            if since >= config.patience:
                break
    return best[1], {"history": history, "best_epoch": best[2], "best_val_loss": best[0],
                     "restarts": restarts, "epochs": epoch}


def _prepare(train: Dataset, arch: Architecture, sqrt: bool):
    rs = ResponseScaling.fit(train.y, sqrt=sqrt)
    cs = CovariateScaling.fit(train.X)
    s = rs.transform(train.y)
    basis = build_basis(arch.num_basis, arch.order, s)
    return rs, cs, s, basis


def fit_spqr(train: Dataset, arch: Architecture = Architecture(),
             config: TrainingConfig = TrainingConfig(), sqrt: bool = False,
             log=None) -> FittedModel:
    """Fit the bulk-only model.

    Scaling constants and knots come from all training rows; a seeded
    ``val_fraction`` of them is held out for checkpoint selection.
    """
    rs, cs, s, basis = _prepare(train, arch, sqrt)
    Xn = cs.transform(train.X)
    tr, va = _split(train.n, config.val_fraction, config.seed)
    M = basis_matrices(basis, s)[0].T
    Mtr, Mva = M[tr], M[va]
    rng = np.random.default_rng([config.seed, 1])
    params = init_network(train.p, arch.hidden, arch.num_basis, arch.activation,
                          seed=[config.seed, 2])

    def val_loss(p):
        _, W = forward(p, Xn[va])
        with np.errstate(divide="ignore"):
            return float(-np.log((W * Mva).sum(axis=1)).mean())

    best, info = _train(params, Xn[tr], Xn[va], lambda rows: _spqr_rows_loss(Mtr[rows]),
                        val_loss, config, 0.0, rng, log)
    meta = {"seed": config.seed, "config": asdict(config), "config_hash": config.digest(),
            "architecture": arch.to_dict(), **info}
    return FittedModel("spqr", basis, best, rs, cs, None, meta)


def fit_spqrx(train: Dataset, arch: Architecture = Architecture(),
              blend: BlendSpec = BlendSpec(0.9, 0.99, 25.0),
              config: TrainingConfig = TrainingConfig(), sqrt: bool = False,
              pretrained: Optional[FittedModel] = None, log=None) -> FittedModel:
    """Fit the blended GP model, warm-started from an SPQR fit.

    ``pretrained`` may supply an existing SPQR fit on the same data and
    architecture; otherwise :func:`fit_spqr` runs first.  The shape output is
    initialized to ``config.xi_init`` for every ``x``.
    """
    if pretrained is None:
        pretrained = fit_spqr(train, arch, config, sqrt, log)
    elif pretrained.mode != "spqr":
        raise ValueError("pretrained model must be an SPQR fit")
    rs, cs, basis = pretrained.response_scaling, pretrained.covariate_scaling, pretrained.basis
    s = rs.transform(train.y)
    Xn = cs.transform(train.X)
    tr, va = _split(train.n, config.val_fraction, config.seed)
    params = add_xi_output(pretrained.network, arch.xi_activation, config.xi_init)
    rng = np.random.default_rng([config.seed, 3])
    str_, sva = s[tr], s[va]

    def val_loss(p):
        xi, W = forward(p, Xn[va])
        nll, _, _, _ = _backend.kernels.spqrx_loss(
            basis.knots, basis.order, W, xi, sva, blend.p_a, blend.p_b, blend.c1, blend.c2,
            0.0, config.grid_size, False)
        return float(nll.mean())

    def make_loss(rows):
        return _spqrx_rows_loss(basis, blend, str_[rows], config.lam, config.grid_size)

    best, info = _train(params, Xn[tr], Xn[va], make_loss, val_loss, config, config.l1,
                        rng, log)
    meta = {"seed": config.seed, "config": asdict(config), "config_hash": config.digest(),
            "architecture": arch.to_dict(), "pretrain": {
                k: pretrained.metadata.get(k) for k in ("best_epoch", "best_val_loss", "epochs")},
            **info}
    return FittedModel("spqrx", basis, best, rs, cs, blend, meta)


# ---------------------------------------------------------------------------
# Grid search


GRID_KEYS = ("num_basis", "hidden", "activation", "p_a", "p_b", "c1")


def grid_search(train: Dataset, grids: dict, mode: str = "spqrx",
                arch: Architecture = Architecture(), blend: BlendSpec = BlendSpec(0.9, 0.99, 25.0),
                config: TrainingConfig = TrainingConfig(), sqrt: bool = False,
                metric: Optional[Callable[[FittedModel], float]] = None,
                threads: int = 1, log=None,
                on_fit: Optional[Callable[[int, dict, FittedModel], None]] = None):
    """Fit every cell of a hyper-parameter grid and keep the best.

    Parameters
    ----------
    grids : dict
        Lists of values keyed by any of ``num_basis``, ``hidden`` (a hidden
        layer tuple or a single width), ``activation``, ``p_a``, ``p_b``,
        ``c1``; missing keys use ``arch``/``blend``.
    metric : callable, optional
        Score to minimize; defaults to the best validation NLL of each fit.
    on_fit : callable, optional
        Called as ``on_fit(index, cell, model)`` for every successful cell.

    Returns
    -------
    best : FittedModel
    table : list of dict
        One row per cell with its settings, score and status, in grid order.
    """
    unknown = set(grids) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    if mode not in ("spqr", "spqrx"):
        raise ValueError("mode must be 'spqr' or 'spqrx'")
    keys = [k for k in GRID_KEYS if k in grids]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]
    if not cells:
        raise ValueError("empty grid")

    def arch_of(cell):
        hidden = cell.get("hidden", arch.hidden)
        hidden = (hidden,) if np.isscalar(hidden) else tuple(hidden)
        return replace(arch, num_basis=int(cell.get("num_basis", arch.num_basis)),
                       hidden=hidden, activation=cell.get("activation", arch.activation))

    pre_cache: dict = {}

    def pretrained_for(a: Architecture):
        key = (a.num_basis, a.hidden, a.activation)
        if key not in pre_cache:
            pre_cache[key] = fit_spqr(train, a, config, sqrt, log)
        return pre_cache[key]

    def run(cell):
        a = arch_of(cell)
        try:
            if mode == "spqr":
                model = pretrained_for(a)
            else:
                bl = BlendSpec(float(cell.get("p_a", blend.p_a)), float(cell.get("p_b", blend.p_b)),
                               float(cell.get("c1", blend.c1)), blend.c2)
                model = fit_spqrx(train, a, bl, config, sqrt, pretrained_for(a), log)
            score = metric(model) if metric else model.metadata["best_val_loss"]
            return model, float(score), "ok"
        except (TrainingError, ValueError, FloatingPointError) as exc:
            return None, math.inf, f"failed: {exc}"

    # pretraining is shared between cells, so build it before fanning out
    for cell in cells:
        pretrained_for(arch_of(cell))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(c) for c in cells]
    table = []
    for i, (cell, (model, score, status)) in enumerate(zip(cells, results)):
        if on_fit is not None and model is not None:
            on_fit(i, cell, model)
        row = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cell.items()}
        row.update(score=score, status=status)
        table.append(row)
    ok = [i for i, (m, sc, _) in enumerate(results) if m is not None and math.isfinite(sc)]
    if not ok:
        raise TrainingError("every grid cell failed")
    best = min(ok, key=lambda i: results[i][1])
    return results[best][0], table
