"""Synthetic regression designs with exact conditional quantile functions.

Three designs are provided:

``lognormal``
    ``p = 3`` uniform covariates; ``log Y ~ N(mu(x), s(x)^2)`` where only
    ``x1`` and ``x2`` act through ``s(x) = logistic(1 - 5 x1 x2)`` and
    ``mu(x) = 5 (1 - s(x))``.
``lomax``
    ``p = 20``; unit-Lomax with survival ``(1 + y)^(-alpha(x))`` and
    ``alpha(x) = 3 + exp(beta0(x) - 1)``.
``bounded_gp``
    ``p = 20``; unit-scale GP with shape ``xi(x) = -logistic(beta0(x))`` in
    ``(-1, 0)``, hence a finite upper endpoint ``-1/xi(x)``.

All randomness comes from numpy's PCG64.  The seed is expanded with
``SeedSequence(seed).spawn(2)``: the first child draws covariates and the
second the uniforms that are pushed through the true quantile function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .regression import Dataset

__all__ = ["SimSpec", "TrueModel", "beta0", "generate", "gen_lognormal", "gen_lomax",
           "gen_gp_bounded", "DESIGNS"]

DESIGNS = {"lognormal": 3, "lomax": 20, "bounded_gp": 20}


@dataclass(frozen=True)
class SimSpec:
    design: str
    n: int
    seed: int = 0
    p: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {sorted(DESIGNS)}")
        if self.p == 0:
            object.__setattr__(self, "p", DESIGNS[self.design])
        if self.p != DESIGNS[self.design]:
            raise ValueError(f"design {self.design} has p={DESIGNS[self.design]}")
        if self.n < 1:
            raise ValueError("n must be positive")


def beta0(X) -> np.ndarray:
    """Nonlinear index of the first ten covariates (rows of a (n, >=10) array)."""
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[1] < 10:
        raise ValueError("beta0 needs at least 10 covariates")
    x = [None] + [X[:, i] for i in range(10)]  # 1-based for readability
    return (x[2] * x[1]
            + x[6] * (1.0 - np.cos(np.pi * x[3] * x[4]))
            + 2.0 * np.sin(x[5]) / (np.abs(x[7] - x[8]) + 2.0)
            + 0.2 * (x[6] + x[8] * x[9] / 2.0) ** 2
            - np.sqrt(x[9] ** 2 + x[10] ** 2 + 2.0))


def _lognormal_params(X):
    s = expit(1.0 - 5.0 * X[:, 0] * X[:, 1])
    return 5.0 * (1.0 - s), s


def lomax_alpha(X):
    return 3.0 + np.exp(-1.0 + beta0(X))


def gp_shape(X):
    return -expit(beta0(X))


class TrueModel:
    """Exact conditional quantile and distribution functions of a design."""

    def __init__(self, design: str):
        if design not in DESIGNS:
            raise ValueError(f"unknown design {design!r}")
        self.design = design
        self.p = DESIGNS[design]

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.p:
            raise ValueError(f"design {self.design} expects {self.p} covariates")
        return X

    def quantile(self, tau, X):
        """``Q(tau | x)``.

        A scalar ``tau`` gives (n,); a 1-d ``tau`` of length m is shared by all
        rows and gives (n, m); an (n, m) ``tau`` is applied row by row.
        """
        X = self._check(X)
        tau = np.asarray(tau, float)
        T = tau if tau.ndim == 0 else tau[None, :] if tau.ndim == 1 else tau
        with np.errstate(divide="ignore"):
            L = -np.log1p(-T)  # -log(1 - tau)
        if self.design == "lognormal":
            mu, s = _lognormal_params(X)
            if tau.ndim >= 1:
                mu, s = mu[:, None], s[:, None]
            return np.exp(mu + s * ndtri(T))
        if self.design == "lomax":
            a = lomax_alpha(X)
            a = a[:, None] if tau.ndim >= 1 else a
            return np.expm1(L / a)
        xi = gp_shape(X)
        xi = xi[:, None] if tau.ndim >= 1 else xi
        return np.expm1(xi * L) / xi

    def cdf(self, y, X):
        """``F(y | x)`` with ``y`` shaped (n,) or (n, m)."""
        X = self._check(X)
        y = np.asarray(y, float)
        col = (lambda v: v[:, None]) if y.ndim == 2 else (lambda v: v)
        if self.design == "lognormal":
            mu, s = _lognormal_params(X)
            with np.errstate(divide="ignore"):
                return np.where(y > 0, ndtr((np.log(np.maximum(y, 1e-300)) - col(mu)) / col(s)), 0.0)
        if self.design == "lomax":
            a = col(lomax_alpha(X))
            return np.where(y > 0, -np.expm1(-a * np.log1p(np.maximum(y, 0.0))), 0.0)
        xi = col(gp_shape(X))
        t = 1.0 + xi * np.maximum(y, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            F = -np.expm1(np.log(np.maximum(t, 0.0)) / -xi)
        return np.where(y <= 0, 0.0, np.where(t <= 0, 1.0, F))

    def upper_endpoint(self, X):
        X = self._check(X)
        if self.design == "bounded_gp":
            return -1.0 / gp_shape(X)
        return np.full(X.shape[0], np.inf)

    def to_dict(self) -> dict:
        return {"design": self.design, "p": self.p}

    @classmethod
    def from_dict(cls, d: dict) -> "TrueModel":
        return cls(d["design"])


def _draw(spec: SimSpec):
    x_seq, u_seq = np.random.SeedSequence(spec.seed).spawn(2)
    X = np.random.Generator(np.random.PCG64(x_seq)).random((spec.n, spec.p))
    u = np.random.Generator(np.random.PCG64(u_seq)).random(spec.n)
    # open interval keeps every response strictly inside the support
    u = np.where(u == 0.0, 2.0 ** -54, u)
    return X, u


def generate(spec: SimSpec):
    """Draw ``(Dataset, TrueModel)`` by inverse-cdf sampling."""
    X, u = _draw(spec)
    truth = TrueModel(spec.design)
    return Dataset(X, truth.quantile(u[:, None], X)[:, 0]), truth


def gen_lognormal(n: int, seed: int = 0):
    return generate(SimSpec("lognormal", n, seed))


def gen_lomax(n: int, seed: int = 0):
    return generate(SimSpec("lomax", n, seed))


def gen_gp_bounded(n: int, seed: int = 0):
    return generate(SimSpec("bounded_gp", n, seed))
