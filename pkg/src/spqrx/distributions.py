"""Generalised Pareto, Beta blending weight and the blended GP distribution.

The blended GP (bGP) distribution joins a bulk distribution ``F`` supported
on [0, 1] with a GP upper tail:

    H(y) = F(y)^(1 - p(y)) * F_GP(y)^p(y),     p(y) = I_Beta((y - a)/(b - a); c1, c2)

with ``a``, ``b`` the ``p_a`` and ``p_b`` quantiles of ``F``.  The GP threshold
and scale are chosen so that ``F_GP(a) = p_a`` and ``F_GP(b) = p_b``; writing
``q(xi, L) = expm1(xi L) / xi`` (``q = L`` at ``xi = 0``) and
``L = -log(1 - p)`` these are

    sigma_tilde = (b - a) / (q(xi, L_b) - q(xi, L_a)),   u_tilde = a - sigma_tilde q(xi, L_a)

Below ``a`` the bGP coincides with the bulk and above ``b`` it is exactly GP.

The functions here take any ``bulk`` object exposing ``cdf``, ``pdf`` and
``quantile`` (e.g. :class:`spqrx.splines.SplineMixture`) and work on scalars
or arrays of ``y``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np

XI_EPS = 1e-7

__all__ = [
    "XI_EPS",
    "GPParams",
    "BlendSpec",
    "BlendGeometry",
    "betainc",
    "beta_pdf",
    "gp_cdf",
    "gp_sf",
    "gp_pdf",
    "gp_logpdf",
    "gp_quantile",
    "blend_weight",
    "blend_weight_deriv",
    "gp_match",
    "blend_geometry",
    "bgp_cdf",
    "bgp_sf",
    "bgp_pdf",
    "bgp_log_pdf",
    "bgp_quantile",
    "validity_penalty",
]


class BulkDistribution(Protocol):
    def cdf(self, y): ...
    def pdf(self, y): ...
    def quantile(self, tau): ...


@dataclass(frozen=True)
class GPParams:
    u: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"GP scale must be positive, got {self.sigma}")

    @property
    def upper_endpoint(self) -> float:
        return self.u - self.sigma / self.xi if self.xi < 0 else math.inf


@dataclass(frozen=True)
class BlendSpec:
    """Blending hyper-parameters, fixed before training."""

    p_a: float
    p_b: float
    c1: float
    c2: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.p_a < self.p_b < 1.0:
            raise ValueError(f"need 0 < p_a < p_b < 1, got ({self.p_a}, {self.p_b})")
        if not (self.c1 > 3.0 and self.c2 > 3.0):
            raise ValueError("blend shapes must satisfy c1 > 3 and c2 > 3")
        if self.c1 < self.c2:
            warnings.warn("c1 < c2 puts more blending weight on the GP than the bulk",
                          UserWarning, stacklevel=3)

    def to_dict(self) -> dict:
        return {"p_a": self.p_a, "p_b": self.p_b, "c1": self.c1, "c2": self.c2}


@dataclass(frozen=True)
class BlendGeometry:
    a: float
    b: float
    u_tilde: float
    sigma_tilde: float

    def gp(self, xi: float) -> GPParams:
        return GPParams(self.u_tilde, self.sigma_tilde, xi)


# ---------------------------------------------------------------------------
# Regularized incomplete beta (modified Lentz continued fraction)


def _betacf(a: float, b: float, x: np.ndarray) -> np.ndarray:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < tiny, tiny, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        h = np.where(active, h * d * c, h)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > 1e-16
        if not active.any():
            break
    return h


def betainc(c1: float, c2: float, x):
    """Regularized incomplete beta function ``I_x(c1, c2)``.

    Continued fraction with the symmetry ``I_x(a, b) = 1 - I_{1-x}(b, a)``
    applied above the mean, where the fraction converges slowly.
    """
    x = np.asarray(x, dtype=float)
    xs = np.clip(x, 0.0, 1.0)
    out = np.where(x >= 1.0, 1.0, 0.0)
    inner = (xs > 0.0) & (xs < 1.0)
    if inner.any():
        xi = xs[inner]
        lbeta = math.lgamma(c1) + math.lgamma(c2) - math.lgamma(c1 + c2)
        front = np.exp(c1 * np.log(xi) + c2 * np.log1p(-xi) - lbeta)
        swap = xi > (c1 + 1.0) / (c1 + c2 + 2.0)
        val = np.empty_like(xi)
        if (~swap).any():
            val[~swap] = front[~swap] * _betacf(c1, c2, xi[~swap]) / c1
        if swap.any():
            val[swap] = 1.0 - front[swap] * _betacf(c2, c1, 1.0 - xi[swap]) / c2
        out[inner] = val
    return float(out) if out.ndim == 0 else out


def beta_pdf(c1: float, c2: float, x):
    x = np.asarray(x, dtype=float)
    lbeta = math.lgamma(c1) + math.lgamma(c2) - math.lgamma(c1 + c2)
    inner = (x > 0.0) & (x < 1.0)
    xc = np.where(inner, x, 0.5)
    out = np.where(inner, np.exp((c1 - 1) * np.log(xc) + (c2 - 1) * np.log1p(-xc) - lbeta), 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# GP pieces; vectorised helpers shared with the pure-Python kernels


def gp_q(xi, L):
    """``q(xi, L) = expm1(xi L)/xi`` and its derivative in ``xi``."""
    xi = np.asarray(xi, dtype=float)
    L = np.asarray(L, dtype=float)
    small = np.abs(xi) < XI_EPS
    xs = np.where(small, 1.0, xi)
    v = xs * L
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.expm1(v)
        q = np.where(small, L, e / xs)
        dq = (L * (e + 1.0) * xs - e) / (xs * xs)
    # series where the closed form cancels
    series = L * L * (0.5 + v * (1 / 3 + v * (1 / 8 + v * (1 / 30 + v / 144))))
    dq = np.where(np.abs(v) < 1e-3, series, dq)
    dq = np.where(small, 0.5 * L * L, dq)
    return q, dq


def gp_logsf_z(z, xi):
    """log survival of a unit-scale GP at standardized excess ``z >= 0``.

    Returns ``-inf`` beyond a finite upper endpoint.
    """
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < XI_EPS
    xs = np.where(small, 1.0, xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = 1.0 + xs * z
        val = np.where(t > 0, -np.log1p(xs * z) / xs, -np.inf)
    return np.where(small, -z, val)


def _check_gp(gp: GPParams):
    if not gp.sigma > 0:
        raise ValueError("GP scale must be positive")


def _ret(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def gp_sf(y, gp: GPParams):
    _check_gp(gp)
    z = np.maximum((np.asarray(y, float) - gp.u) / gp.sigma, 0.0)
    return _ret(np.exp(gp_logsf_z(z, gp.xi)))


def gp_cdf(y, gp: GPParams):
    """GP distribution function; 0 below ``u`` and 1 above a finite endpoint."""
    _check_gp(gp)
    z = np.maximum((np.asarray(y, float) - gp.u) / gp.sigma, 0.0)
    return _ret(-np.expm1(gp_logsf_z(z, gp.xi)))


def gp_logpdf(y, gp: GPParams):
    _check_gp(gp)
    y = np.asarray(y, float)
    z = (y - gp.u) / gp.sigma
    zc = np.maximum(z, 0.0)
    logS = gp_logsf_z(zc, gp.xi)
    if abs(gp.xi) < XI_EPS:
        logt = np.zeros_like(zc)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            logt = np.log1p(gp.xi * zc)
    out = np.where(np.isfinite(logS), logS - math.log(gp.sigma) - logt, -np.inf)
    return _ret(np.where(z < 0, -np.inf, out))


def gp_pdf(y, gp: GPParams):
    return _ret(np.exp(gp_logpdf(y, gp)))


def gp_quantile(tau, gp: GPParams):
    """Closed-form GP quantile; ``tau = 1`` only allowed for ``xi < 0``."""
    _check_gp(gp)
    tau = np.asarray(tau, float)
    if np.any((tau < 0) | (tau > 1)):
        raise ValueError("tau must lie in [0, 1]")
    if np.any(tau == 1.0) and gp.xi >= 0:
        raise ValueError("the GP upper endpoint is infinite for xi >= 0")
    with np.errstate(divide="ignore"):
        L = -np.log1p(-tau)
    q, _ = gp_q(gp.xi, L)
    q = np.where(np.isinf(L), -1.0 / gp.xi if gp.xi < 0 else np.inf, q)
    return _ret(gp.u + gp.sigma * q)


# ---------------------------------------------------------------------------
# Blending


def blend_weight(y, geom: BlendGeometry, spec: BlendSpec):
    """``p(y) = I_Beta((y - a)/(b - a); c1, c2)``: 0 below ``a``, 1 above ``b``."""
    if not geom.b > geom.a:
        raise ValueError("blending interval needs b > a")
    s = (np.asarray(y, float) - geom.a) / (geom.b - geom.a)
    return _ret(betainc(spec.c1, spec.c2, s))


def blend_weight_deriv(y, geom: BlendGeometry, spec: BlendSpec):
    if not geom.b > geom.a:
        raise ValueError("blending interval needs b > a")
    D = geom.b - geom.a
    s = (np.asarray(y, float) - geom.a) / D
    return _ret(beta_pdf(spec.c1, spec.c2, s) / D)


def gp_match(a: float, b: float, spec: BlendSpec, xi: float) -> tuple[float, float]:
    """GP ``(sigma_tilde, u_tilde)`` with ``F_GP(a) = p_a`` and ``F_GP(b) = p_b``."""
    if not b > a:
        raise ValueError(f"degenerate blending interval a={a}, b={b}")
    La, Lb = -math.log1p(-spec.p_a), -math.log1p(-spec.p_b)
    qa, _ = gp_q(xi, La)
    qb, _ = gp_q(xi, Lb)
    sigma = (b - a) / float(qb - qa)
    return sigma, a - sigma * float(qa)


def blend_geometry(bulk: BulkDistribution, xi: float, spec: BlendSpec) -> BlendGeometry:
    a = float(bulk.quantile(spec.p_a))
    b = float(bulk.quantile(spec.p_b))
    sigma, u = gp_match(a, b, spec, xi)
    return BlendGeometry(a, b, u, sigma)


def _parts(y, bulk, xi, spec):
    geom = blend_geometry(bulk, xi, spec)
    y = np.asarray(y, float)
    return geom, geom.gp(xi), y


def bgp_cdf(y, bulk: BulkDistribution, xi: float, spec: BlendSpec):
    """Blended GP distribution function ``H``."""
    geom, gp, y = _parts(y, bulk, xi, spec)
    H = np.asarray(bulk.cdf(y), float).copy()
    tail = y >= geom.b
    if np.any(tail):
        H[tail] = gp_cdf(y[tail], gp)
    mid = (y > geom.a) & ~tail
    if np.any(mid):
        p = np.asarray(blend_weight(y[mid], geom, spec))
        Fm = H[mid]
        with np.errstate(divide="ignore", invalid="ignore"):
            logH = (1 - p) * np.log(Fm) + p * np.log(np.asarray(gp_cdf(y[mid], gp)))
        H[mid] = np.where(p > 0, np.exp(logH), Fm)
    return _ret(H)


def bgp_sf(y, bulk: BulkDistribution, xi: float, spec: BlendSpec):
    """Survival ``1 - H``, computed from the GP directly in the tail."""
    geom, gp, y = _parts(y, bulk, xi, spec)
    S = 1.0 - np.asarray(bgp_cdf(y, bulk, xi, spec), float)
    tail = y >= geom.b
    if np.any(tail):
        S[tail] = gp_sf(y[tail], gp)
    return _ret(S)


def _blend_bracket(y, bulk, geom, gp, spec):
    F = np.asarray(bulk.cdf(y), float)
    f = np.asarray(bulk.pdf(y), float)
    p = np.asarray(blend_weight(y, geom, spec), float)
    dp = np.asarray(blend_weight_deriv(y, geom, spec), float)
    FG = np.asarray(gp_cdf(y, gp), float)
    fG = np.asarray(gp_pdf(y, gp), float)
    logH = (1 - p) * np.log(F) + p * np.log(FG)
    bracket = dp * np.log(FG) + p * fG / FG - dp * np.log(F) + (1 - p) * f / F
    return logH, bracket


def bgp_pdf(y, bulk: BulkDistribution, xi: float, spec: BlendSpec):
    """Blended GP density ``h``; may dip below zero inside ``[a, b]`` for
    pathological parameter combinations (see :func:`validity_penalty`)."""
    geom, gp, y = _parts(y, bulk, xi, spec)
    h = np.asarray(bulk.pdf(y), float).copy()
    tail = y >= geom.b
    if np.any(tail):
        h[tail] = gp_pdf(y[tail], gp)
    mid = (y > geom.a) & ~tail
    if np.any(mid):
        logH, br = _blend_bracket(y[mid], bulk, geom, gp, spec)
        h[mid] = np.exp(logH) * br
    return _ret(h)


def bgp_log_pdf(y, bulk: BulkDistribution, xi: float, spec: BlendSpec):
    """``log h`` evaluated in log space; ``nan`` where the density is negative."""
    geom, gp, y = _parts(y, bulk, xi, spec)
    with np.errstate(divide="ignore"):
        lh = np.log(np.asarray(bulk.pdf(y), float))
    tail = y >= geom.b
    if np.any(tail):
        lh[tail] = gp_logpdf(y[tail], gp)
    mid = (y > geom.a) & ~tail
    if np.any(mid):
        logH, br = _blend_bracket(y[mid], bulk, geom, gp, spec)
        with np.errstate(divide="ignore", invalid="ignore"):
            lh[mid] = logH + np.log(br)
    return _ret(lh)


def bgp_quantile(tau, bulk: BulkDistribution, xi: float, spec: BlendSpec,
                 tol: float = 1e-12, max_iter: int = 200):
    """Quantile of the blended GP.

    Bulk quantile for ``tau <= p_a``, closed-form GP quantile for
    ``tau >= p_b`` and bisection on ``H`` over ``[a, b]`` in between.
    """
    geom, gp, _ = _parts(0.0, bulk, xi, spec)
    tau = np.asarray(tau, float)
    if np.any((tau <= 0) | (tau >= 1)):
        raise ValueError("tau must lie in (0, 1)")
    out = np.empty(tau.shape)
    flat_t, flat_o = tau.ravel(), out.ravel()
    for i, t in enumerate(flat_t):
        if t <= spec.p_a:
            flat_o[i] = bulk.quantile(t) if t < spec.p_a else geom.a
        elif t >= spec.p_b:
            flat_o[i] = gp_quantile(t, gp) if t > spec.p_b else geom.b
        else:
            lo, hi = geom.a, geom.b
            for _ in range(max_iter):
                mid = 0.5 * (lo + hi)
                err = float(bgp_cdf(mid, bulk, xi, spec)) - t
                if abs(err) <= tol or hi - lo <= 4e-16 * hi:
                    break
                if err < 0:
                    lo = mid
                else:
                    hi = mid
            if abs(err) > 1e-10:
                raise RuntimeError("bisection did not converge; H is not monotone here")
            flat_o[i] = mid
    return _ret(out)


def validity_penalty(bulk: BulkDistribution, xi: float, spec: BlendSpec,
                     grid_size: int = 128) -> float:
    """Riemann approximation of ``int max(0, -h(y)) dy``.

    The grid is evenly spaced over ``[a, b]`` padded by one cell on each side,
    the only region where ``h`` can be negative.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    geom = blend_geometry(bulk, xi, spec)
    delta = (geom.b - geom.a) / (grid_size - 3)
    ys = geom.a + (np.arange(grid_size) - 1) * delta
    h = np.asarray(bgp_pdf(ys, bulk, xi, spec))
    return float(delta * np.maximum(0.0, -h).sum())
