"""Accumulated local effects (ALE) and ALE-based variable importance.

For a model function ``g`` and covariate ``j`` the first-order ALE is built on
bins of ``x_j`` with edges at its empirical quantiles.  Each row contributes
``g(x with x_j = upper edge) - g(x with x_j = lower edge)`` to its bin; bin
means are accumulated from the lowest edge and the resulting curve, linearly
interpolated between edges, is centered to mean zero over the observed
``x_j``.  The importance of ``x_j`` is the standard deviation of that curve
over the observed ``x_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .regression import FittedModel

__all__ = ["ALEProfile", "VIResult", "ale", "vi_score", "vi_quantile_profile", "vi_xi",
           "ale_quantile", "ale_xi", "DEFAULT_TAUS"]

DEFAULT_BINS = 40
DEFAULT_TAUS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2).tolist())


@dataclass(frozen=True, eq=False)
class ALEProfile:
    """Centered ALE values at the bin edges of covariate ``j``.

    ``effects`` has one row per edge and one column per output of ``g``;
    ``offset`` is the centering constant that was subtracted.
    """

    j: int
    edges: np.ndarray
    effects: np.ndarray
    offset: np.ndarray

    def __call__(self, x):
        """Linear interpolation of the profile at ``x``; shape (len(x), m)."""
        x = np.asarray(x, float).ravel()
        return np.column_stack([np.interp(x, self.edges, self.effects[:, c])
                                for c in range(self.effects.shape[1])])


@dataclass(frozen=True, eq=False)
class VIResult:
    """Importance ``scores[l, j]`` of covariate ``j`` for output ``l`` (e.g. a level)."""

    scores: np.ndarray
    taus: Optional[np.ndarray] = None


def _edges(x, bins):
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, bins + 1)))
    if edges.size < 2:
        raise ValueError("covariate needs at least two distinct values")
    return edges


def _assign(x, edges):
    # bins are (e_{k-1}, e_k], with the lowest edge included in the first bin
    return np.clip(np.searchsorted(edges, x, side="left") - 1, 0, edges.size - 2)


def _merge_empty(x, edges):
    while True:
        counts = np.bincount(_assign(x, edges), minlength=edges.size - 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return edges
        k = empty[0]
        # fold into the neighbouring bin with more data
        left = counts[k - 1] if k > 0 else -1
        right = counts[k + 1] if k + 1 < counts.size else -1
        drop = k if left >= right else k + 1
        edges = np.delete(edges, drop)


def ale(g: Callable[[np.ndarray], np.ndarray], X, j: int, bins: int = DEFAULT_BINS) -> ALEProfile:
    """First-order ALE of ``g`` with respect to column ``j`` of ``X``.

    Parameters
    ----------
    g : callable
        Vectorized over rows: ``g(X)`` returns shape (n,) or (n, m).
    X : array_like, shape (n, p)
    j : int
    bins : int
        Number of quantile bins (at least 2); tied quantiles and empty bins
        are merged.
    """
    X = np.atleast_2d(np.asarray(X, float))
    if bins < 2:
        raise ValueError("bins must be at least 2")
    if not 0 <= j < X.shape[1]:
        raise IndexError(f"covariate index {j} out of range")
    x = X[:, j]
    edges = _merge_empty(x, _edges(x, bins))
    k = _assign(x, edges)
    lo, hi = X.copy(), X.copy()
    lo[:, j] = edges[k]
    hi[:, j] = edges[k + 1]
    n = X.shape[0]
    both = np.asarray(g(np.vstack([lo, hi])), float)
    both = both.reshape(2 * n, -1)
    diff = both[n:] - both[:n]
    nb = edges.size - 1
    sums = np.zeros((nb, diff.shape[1]))
    np.add.at(sums, k, diff)
    local = sums / np.bincount(k, minlength=nb)[:, None]
    acc = np.vstack([np.zeros((1, diff.shape[1])), np.cumsum(local, axis=0)])
    raw = ALEProfile(j, edges, acc, np.zeros(diff.shape[1]))
    offset = raw(x).mean(axis=0)
    return ALEProfile(j, edges, acc - offset, offset)


def vi_score(profile: ALEProfile, x) -> np.ndarray:
    """Population standard deviation of the profile over observed ``x_j``; one value per output."""
    return profile(x).std(axis=0)


def _quantile_g(model: FittedModel, taus):
    taus = np.asarray(taus, float)

    def g(X):
        return model.quantile(X, taus)
    return g


def ale_quantile(model: FittedModel, X, j: int, taus: Sequence[float] = DEFAULT_TAUS,
                 bins: int = DEFAULT_BINS) -> ALEProfile:
    """ALE of the conditional quantiles (original units) at levels ``taus``."""
    return ale(_quantile_g(model, taus), X, j, bins)


def ale_xi(model: FittedModel, X, j: int, bins: int = DEFAULT_BINS) -> ALEProfile:
    if model.mode != "spqrx":
        raise ValueError("SPQR models have no shape function")
    return ale(model.xi, X, j, bins)


def vi_quantile_profile(model: FittedModel, X, taus: Sequence[float] = DEFAULT_TAUS,
                        bins: int = DEFAULT_BINS) -> VIResult:
    """Importance of every covariate for the conditional quantile at each level."""
    X = np.atleast_2d(np.asarray(X, float))
    taus = np.asarray(taus if len(taus) else DEFAULT_TAUS, float)
    g = _quantile_g(model, taus)
    scores = np.column_stack([vi_score(ale(g, X, j, bins), X[:, j]) for j in range(X.shape[1])])
    return VIResult(scores, taus)


def vi_xi(model: FittedModel, X, bins: int = DEFAULT_BINS) -> VIResult:
    """Importance of every covariate for the shape function ``xi(x)``."""
    if model.mode != "spqrx":
        raise ValueError("SPQR models have no shape function")
    X = np.atleast_2d(np.asarray(X, float))
    scores = np.array([[vi_score(ale(model.xi, X, j, bins), X[:, j])[0]
                        for j in range(X.shape[1])]])
    return VIResult(scores, None)
