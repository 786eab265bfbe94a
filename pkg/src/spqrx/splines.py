"""M-spline and I-spline bases on the unit interval.

An order-``d`` basis with ``K`` functions lives on ``K + d`` knots
``t[0] <= ... <= t[K + d - 1]``.  The boundary positions are repeated so that
``t[0] = ... = t[d - 1] = 0`` and ``t[K] = ... = t[K + d - 1] = 1``; the
``K - d`` interior knots sit at empirical quantiles of the (scaled) response.
Basis indices are zero-based throughout.

``M_k`` is the order-``d`` M-spline (piecewise polynomial of degree ``d - 1``,
integrating to one over ``[t[k], t[k + d]]``) and ``I_k`` its integral from 0.
Internally both are obtained from Cox--de Boor B-splines:

    M_k = d * B_k^d / (t[k + d] - t[k]),   I_k = sum_{i >= k} B_i^{d+1}

where the order ``d + 1`` B-splines use the knot vector with one extra knot at 1.

Evaluation is right-continuous at interior knots and left-continuous at 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SplineBasis",
    "SplineMixture",
    "build_basis",
    "mspline_eval",
    "ispline_eval",
    "basis_matrices",
    "local_basis",
]


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Immutable M/I-spline basis on [0, 1].

    Attributes
    ----------
    order : int
        Spline order ``d`` (``d = 3`` gives piecewise quadratics).
    knots : numpy.ndarray
        Full knot vector of length ``num_basis + order`` with repeated
        boundary knots.
    num_basis : int
        Number of basis functions ``K``.
    """

    order: int
    knots: np.ndarray
    num_basis: int
    _ext: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        d, K = int(self.order), int(self.num_basis)
        if d < 1 or K < d:
            raise ValueError(f"need num_basis >= order >= 1, got K={K}, d={d}")
        if knots.shape != (K + d,):
            raise ValueError(f"expected {K + d} knots, got {knots.shape}")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError("knot vector must start at 0 and end at 1")
        if np.any(knots[:d] != 0.0) or np.any(knots[K:] != 1.0):
            raise ValueError("boundary knots must have multiplicity equal to the order")
        if K > d and np.any(np.diff(knots[d - 1:K + 1]) <= 0):
            raise ValueError("interior knots must be strictly increasing inside (0, 1)")
        knots.setflags(write=False)
        ext = np.append(knots, 1.0)
        ext.setflags(write=False)
        object.__setattr__(self, "order", d)
        object.__setattr__(self, "num_basis", K)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_ext", ext)

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[self.order:self.num_basis]

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot positions, 0 and 1 included."""
        return self.knots[self.order - 1:self.num_basis + 1]

    @property
    def extended_knots(self) -> np.ndarray:
        return self._ext

    def to_dict(self) -> dict:
        return {"order": self.order, "num_basis": self.num_basis,
                "knots": [float(t) for t in self.knots]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(order=int(d["order"]), knots=np.asarray(d["knots"], float),
                   num_basis=int(d["num_basis"]))


def _strictly_increasing(pos: np.ndarray) -> tuple[np.ndarray, bool]:
    # pos includes the boundary 0 and 1 at either end
    gaps = np.diff(pos)
    if np.all(gaps > 0):
        return pos, False
    positive = gaps[gaps > 0]
    step = (positive.min() if positive.size else 1.0) / (len(pos) + 1)
    pos = pos.copy()
    for i in range(1, len(pos) - 1):
        if pos[i] <= pos[i - 1]:
            pos[i] = pos[i - 1] + step
    # pushing ties upward can collide with the right boundary; pull back from there
    for i in range(len(pos) - 2, 0, -1):
        if pos[i] >= pos[i + 1]:
            pos[i] = pos[i + 1] - step
    if np.any(np.diff(pos) <= 0):
        raise ValueError("could not separate coincident knots")
    return pos, True


def build_basis(K: int, d: int, response_sample) -> SplineBasis:
    """Build an order-``d`` basis with ``K`` functions and quantile knots.

    Interior knots are the empirical quantiles of ``response_sample`` at the
    levels ``j / (K - d + 1)``, ``j = 1, ..., K - d``; 0 and 1 are always
    knot positions.  Tied quantiles are nudged apart (with a warning).
    """
    K, d = int(K), int(d)
    if d < 1:
        raise ValueError("order must be >= 1")
    if K < d:
        raise ValueError(f"need K >= d, got K={K}, d={d}")
    sample = np.asarray(response_sample, dtype=float).ravel()
    if sample.size == 0:
        raise ValueError("response sample is empty")
    if not np.all(np.isfinite(sample)) or sample.min() < 0.0 or sample.max() > 1.0:
        raise ValueError("response sample must lie in [0, 1]")
    n_int = K - d
    levels = np.arange(1, n_int + 1) / (n_int + 1)
    interior = np.quantile(sample, levels) if n_int else np.empty(0)
    pos, moved = _strictly_increasing(np.concatenate([[0.0], interior, [1.0]]))
    if moved:
        warnings.warn("coincident knots from tied responses were perturbed apart",
                      RuntimeWarning, stacklevel=2)
    knots = np.concatenate([np.zeros(d), pos[1:-1], np.ones(d)])
    return SplineBasis(order=d, knots=knots, num_basis=K)


def find_span(basis: SplineBasis, y: np.ndarray) -> np.ndarray:
    """Index ``j`` with ``t[j] <= y < t[j+1]`` (clipped to the valid range)."""
    j = np.searchsorted(basis.knots, y, side="right") - 1
    return np.clip(j, basis.order - 1, basis.num_basis - 1)


def _cox_de_boor(ext: np.ndarray, j: np.ndarray, y: np.ndarray, order: int):
    """Nonzero B-splines of orders 1..order at ``y`` in span ``j``.

    Returns a list whose entry ``r - 1`` is an ``(n, r)`` array holding
    ``B_{j-r+1}^r, ..., B_j^r``.
    """
    n = y.shape[0]
    N = np.ones((n, 1))
    out = [N]
    left = np.empty((n, order))
    right = np.empty((n, order))
    for r in range(1, order):
        left[:, r] = y - ext[j + 1 - r]
        right[:, r] = ext[j + r] - y
        new = np.empty((n, r + 1))
        saved = np.zeros(n)
        for s in range(r):
            temp = N[:, s] / (right[:, s + 1] + left[:, r - s])
            new[:, s] = saved + right[:, s + 1] * temp
            saved = left[:, r - s] * temp
        new[:, r] = saved
        N = new
        out.append(N)
    return out


def local_basis(basis: SplineBasis, y, derivative: bool = False):
    """Local (nonzero) M- and I-spline values at points in [0, 1].

    Parameters
    ----------
    basis : SplineBasis
    y : array_like
        Points, clipped to [0, 1].
    derivative : bool
        Also return the local M-spline derivatives.

    Returns
    -------
    j : ndarray of int
        Knot span of each point.
    M : ndarray, shape (n, d)
        ``M_{j-d+1}, ..., M_j``.
    I : ndarray, shape (n, d + 1)
        ``I_{j-d}, ..., I_j``; every ``I_k`` with ``k < j - d`` equals one and
        every ``I_k`` with ``k > j`` is zero.
    dM : ndarray, shape (n, d), optional
    """
    d, t = basis.order, basis.knots
    y = np.clip(np.asarray(y, dtype=float).ravel(), 0.0, 1.0)
    j = find_span(basis, y)
    Bs = _cox_de_boor(basis.extended_knots, j, y, d + 1)
    Bd, Bd1 = Bs[d - 1], Bs[d]
    M = np.empty_like(Bd)
    for c in range(d):
        i = j - d + 1 + c
        M[:, c] = d * Bd[:, c] / (t[i + d] - t[i])
    I = np.cumsum(Bd1[:, ::-1], axis=1)[:, ::-1]
    if not derivative:
        return j, M, I
    dM = np.zeros_like(M)
    if d > 1:
        Bm = Bs[d - 2]  # B_{j-d+2}^{d-1} ... B_j^{d-1}
        for c in range(d):
            i = j - d + 1 + c
            lo = Bm[:, c - 1] / (t[i + d - 1] - t[i]) if c >= 1 else 0.0
            hi = Bm[:, c] / (t[i + d] - t[i + 1]) if c < d - 1 else 0.0
            dM[:, c] = d * (d - 1) * (lo - hi) / (t[i + d] - t[i])
    return j, M, I, dM


def _full(basis: SplineBasis, ys: np.ndarray):
    d, K = basis.order, basis.num_basis
    j, Mloc, Iloc = local_basis(basis, ys)
    n = ys.shape[0]
    M = np.zeros((K, n))
    I = np.zeros((K, n))
    cols = np.arange(n)
    for c in range(d):
        M[j - d + 1 + c, cols] = Mloc[:, c]
    ones = np.arange(K)[:, None] < (j - d)[None, :]
    I[ones] = 1.0
    for c in range(d + 1):
        k = j - d + c
        ok = k >= 0
        I[k[ok], cols[ok]] = Iloc[ok, c]
    return M, I


def _check_y(ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    if not np.all(np.isfinite(ys)) or np.any(ys < 0.0) or np.any(ys > 1.0):
        raise ValueError("spline arguments must lie in [0, 1]")
    return ys


def _check_k(basis: SplineBasis, k: int) -> int:
    if not 0 <= k < basis.num_basis:
        raise IndexError(f"basis index {k} out of range [0, {basis.num_basis})")
    return int(k)


def mspline_eval(basis: SplineBasis, k: int, y):
    """Value of ``M_k`` at ``y`` (scalar or array in [0, 1])."""
    k = _check_k(basis, k)
    ys = _check_y(y)
    M, _ = _full(basis, np.atleast_1d(ys).ravel())
    out = M[k].reshape(np.shape(ys))
    return float(out) if out.ndim == 0 else out


def ispline_eval(basis: SplineBasis, k: int, y):
    """Value of ``I_k(y) = int_0^y M_k``."""
    k = _check_k(basis, k)
    ys = _check_y(y)
    _, I = _full(basis, np.atleast_1d(ys).ravel())
    out = I[k].reshape(np.shape(ys))
    return float(out) if out.ndim == 0 else out


def basis_matrices(basis: SplineBasis, ys) -> tuple[np.ndarray, np.ndarray]:
    """``(M, I)``, each ``K x n``, with column ``j`` holding the basis at ``ys[j]``."""
    ys = _check_y(ys).ravel()
    return _full(basis, ys)


class SplineMixture:
    """Convex combination of the basis: density ``sum w_k M_k``, cdf ``sum w_k I_k``.

    Serves as the bulk distribution of the blended GP.  Outside [0, 1] the
    density is zero and the cdf is clamped to 0 or 1.
    """

    def __init__(self, basis: SplineBasis, weights):
        w = np.asarray(weights, dtype=float)
        if w.shape != (basis.num_basis,):
            raise ValueError("weights must have length num_basis")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be a convex combination")
        self.basis = basis
        self.weights = w

    def _eval(self, y):
        y = np.asarray(y, dtype=float)
        flat = y.ravel()
        M, I = _full(self.basis, np.clip(flat, 0.0, 1.0))
        f = self.weights @ M
        F = self.weights @ I
        f[(flat < 0) | (flat > 1)] = 0.0
        F[flat < 0] = 0.0
        F[flat > 1] = 1.0
        return F.reshape(y.shape), f.reshape(y.shape)

    def cdf(self, y):
        F = self._eval(y)[0]
        return float(F) if F.ndim == 0 else F

    def pdf(self, y):
        f = self._eval(y)[1]
        return float(f) if f.ndim == 0 else f

    def quantile(self, tau):
        from ._backend import kernels

        tau = np.asarray(tau, dtype=float)
        Q = kernels.spqr_quantile(self.basis.knots, self.basis.order,
                                  self.weights[None, :], tau.reshape(1, -1))
        Q = Q.reshape(tau.shape)
        return float(Q) if Q.ndim == 0 else Q
