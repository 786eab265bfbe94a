"""Pure numpy implementation of the hot kernels.

Mirrors ``_ckernels.pyx`` function by function.  All kernels take the raw knot
vector and order rather than a :class:`SplineBasis` so both backends share one
signature.  Rows of ``W`` are per-observation mixture weights; ``xi`` holds the
per-row GP shape.
"""

from __future__ import annotations

import math

import numpy as np

from .distributions import XI_EPS, beta_pdf, betainc, gp_q
from .splines import SplineBasis, basis_matrices, local_basis

_CHUNK = 200_000


def _basis(knots, d) -> SplineBasis:
    knots = np.asarray(knots, dtype=float)
    return SplineBasis(order=int(d), knots=knots, num_basis=len(knots) - int(d))


class _Bulk:
    """Row-indexed evaluation of ``F = W I`` and ``f = W M``."""

    def __init__(self, basis: SplineBasis, W: np.ndarray):
        self.basis = basis
        self.W = W
        n = W.shape[0]
        self.Wp = np.hstack([np.zeros((n, 1)), W])
        self.cw = np.hstack([np.zeros((n, 1)), np.cumsum(W, axis=1)])

    def eval(self, rows, y, deriv=False):
        d = self.basis.order
        y = np.asarray(y, float)
        j, M, I, dM = local_basis(self.basis, y, derivative=True)
        kM = j[:, None] - d + 1 + np.arange(d)
        kI = j[:, None] - d + np.arange(d + 1)
        wM = self.W[rows[:, None], kM]
        wI = self.Wp[rows[:, None], kI + 1]
        F = self.cw[rows, np.maximum(j - d, 0)] + (wI * I).sum(axis=1)
        f = (wM * M).sum(axis=1)
        fp = (wM * dM).sum(axis=1)
        lo, hi = y < 0.0, y > 1.0
        F = np.where(lo, 0.0, np.where(hi, 1.0, F))
        f = np.where(lo | hi, 0.0, f)
        fp = np.where(lo | hi, 0.0, fp)
        local = (j, M, I)
        return (F, f, fp, local) if deriv else (F, f, local)

    def scatter(self, dW, P, rows, local, gF, gf):
        """Accumulate ``gF * dF/dW + gf * df/dW`` into ``dW`` (prefix part into ``P``)."""
        d, K = self.basis.order, self.basis.num_basis
        j, M, I = local
        np.add.at(P, (rows, np.maximum(j - d, 0)), gF)
        for c in range(d + 1):
            k = j - d + c
            ok = k >= 0
            np.add.at(dW, (rows[ok], k[ok]), gF[ok] * I[ok, c])
        for c in range(d):
            np.add.at(dW, (rows, j - d + 1 + c), gf * M[:, c])

    @staticmethod
    def finish(dW, P):
        rc = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
        dW += rc[:, 1:]


# ---------------------------------------------------------------------------
# Bulk quantiles


def _bulk_quantile_flat(bulk: _Bulk, Fk, rows, t):
    bp = bulk.basis.breakpoints
    nb = bp.size
    out = np.empty_like(t)
    for s in range(0, t.size, _CHUNK):
        sl = slice(s, s + _CHUNK)
        r, tt = rows[sl], t[sl]
        cnt = (Fk[r] <= tt[:, None]).sum(axis=1)
        i = np.clip(cnt - 1, 0, nb - 2)
        lo, hi = bp[i].copy(), bp[i + 1].copy()
        Flo, Fhi = Fk[r, i], Fk[r, i + 1]
        span = np.where(Fhi > Flo, Fhi - Flo, 1.0)
        y = lo + np.clip((tt - Flo) / span, 0.0, 1.0) * (hi - lo)
        exact = tt == Flo
        y[exact] = lo[exact]
        active = ~exact
        for _ in range(100):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            F, f, _ = bulk.eval(r[idx], y[idx])
            err = F - tt[idx]
            below = err < 0
            lo[idx] = np.where(below, y[idx], lo[idx])
            hi[idx] = np.where(below, hi[idx], y[idx])
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = y[idx] - err / f
            ok = (f > 0) & (newton >= lo[idx]) & (newton <= hi[idx])
            ynew = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
            ynew = np.where(err == 0, y[idx], ynew)
            step = np.abs(ynew - y[idx])
            y[idx] = ynew
            done = (err == 0) | (step <= 1e-15) | (hi[idx] - lo[idx] <= 1e-16)
            active[idx[done]] = False
        out[sl] = y
    out = np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, out))
    return out


def _knot_cdf(basis: SplineBasis, W):
    _, Ik = basis_matrices(basis, basis.breakpoints)
    Fk = W @ Ik
    Fk[:, 0], Fk[:, -1] = 0.0, 1.0
    return Fk


def bulk_eval(knots, d, W, Y):
    """Bulk cdf and density at ``Y`` (n x m) for each row of ``W``."""
    basis = _basis(knots, d)
    W = np.ascontiguousarray(W, float)
    Y = np.asarray(Y, float)
    n, m = Y.shape
    rows = np.repeat(np.arange(n), m)
    F, f, _ = _Bulk(basis, W).eval(rows, Y.ravel())
    return F.reshape(n, m), f.reshape(n, m)


def spqr_quantile(knots, d, W, T):
    """Bulk quantiles at levels ``T`` (n x m), solved to machine precision."""
    basis = _basis(knots, d)
    W = np.ascontiguousarray(W, float)
    T = np.asarray(T, float)
    n, m = T.shape
    bulk = _Bulk(basis, W)
    rows = np.repeat(np.arange(n), m)
    Q = _bulk_quantile_flat(bulk, _knot_cdf(basis, W), rows, T.ravel())
    return Q.reshape(n, m)


# ---------------------------------------------------------------------------
# Blend geometry and the bGP pieces


def _lvals(pa, pb):
    if not 0.0 < pa < pb < 1.0:
        raise ValueError("need 0 < p_a < p_b < 1")
    return -math.log1p(-pa), -math.log1p(-pb)


class _Rows:
    """Per-row blend geometry with partial derivatives of (u, sigma)."""

    def __init__(self, basis, W, xi, pa, pb):
        n = W.shape[0]
        self.bulk = _Bulk(basis, W)
        Fk = _knot_cdf(basis, W)
        rows = np.repeat(np.arange(n), 2)
        T = np.tile([pa, pb], n)
        ab = _bulk_quantile_flat(self.bulk, Fk, rows, T).reshape(n, 2)
        self.a, self.b = ab[:, 0].copy(), ab[:, 1].copy()
        self.xi = np.ascontiguousarray(np.broadcast_to(np.asarray(xi, float), (n,)))
        La, Lb = _lvals(pa, pb)
        qa, dqa = gp_q(self.xi, La)
        qb, dqb = gp_q(self.xi, Lb)
        den = qb - qa
        self.sig = (self.b - self.a) / den
        self.u = self.a - self.sig * qa
        self.sig_a = -1.0 / den
        self.sig_b = 1.0 / den
        self.sig_xi = -self.sig * (dqb - dqa) / den
        self.u_a = 1.0 - qa * self.sig_a
        self.u_b = -qa * self.sig_b
        self.u_xi = -dqa * self.sig - qa * self.sig_xi


def _gp_terms(z, xi):
    """log survival, log(1 + xi z) and their partials in (z, xi)."""
    small = np.abs(xi) < XI_EPS
    xs = np.where(small, 1.0, xi)
    v = xs * z
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = 1.0 + v
        l1p = np.log1p(v)
        logS = np.where(small, -z, np.where(t > 0, -l1p / xs, -np.inf))
        logt = np.where(small, 0.0, l1p)
        dS_dz = np.where(small, -1.0, -1.0 / t)
        closed = l1p / (xs * xs) - z / (xs * t)
        series = z * z * (0.5 + v * (-2 / 3 + v * (0.75 + v * (-0.8 + v * 5 / 6))))
        dS_dxi = np.where(small, 0.5 * z * z, np.where(np.abs(v) < 1e-3, series, closed))
        dt_dz = np.where(small, 0.0, xs / t)
        dt_dxi = np.where(small, z, z / t)
    return logS, logt, dS_dz, dS_dxi, dt_dz, dt_dxi


def _blend(F, f, fp, y, a, b, u, sig, xi, p, fb, dfb, grad):
    """Blended density on (a, b) and its adjoints (see module docs)."""
    D = b - a
    s = (y - a) / D
    z = (y - u) / sig
    logS, logt, dS_dz, dS_dxi, dt_dz, dt_dxi = _gp_terms(z, xi)
    S = np.exp(logS)
    lG = np.log(-np.expm1(logS))
    gG = np.exp(logS - np.log(sig) - logt - lG)
    lF = np.log(F)
    g = f / F
    pd = fb / D
    H = np.exp((1 - p) * lF + p * lG)
    Bk = pd * (lG - lF) + p * gG + (1 - p) * g
    h = H * Bk
    if not grad:
        return H, h, None
    h_lF = h * (1 - p) - H * pd
    h_lG = h * p + H * pd
    h_p = h * (lG - lF) + H * (gG - g)
    h_pd = H * (lG - lF)
    h_gG = H * p
    h_g = H * (1 - p)
    h_F = h_lF / F - h_g * f / (F * F)
    h_f = h_g / F
    dlG = -S / (1.0 - S)
    h_logS = h_lG * dlG + h_gG * gG * (1.0 - dlG)
    h_logt = -h_gG * gG
    h_sig = -h_gG * gG / sig
    h_z = h_logS * dS_dz + h_logt * dt_dz
    h_xi = h_logS * dS_dxi + h_logt * dt_dxi
    h_u = -h_z / sig
    h_sig = h_sig - h_z * z / sig
    h_s = h_p * fb + h_pd * dfb / D
    h_D = -h_pd * fb / (D * D)
    h_a = h_s * (s - 1.0) / D - h_D
    h_b = -h_s * s / D + h_D
    h_y = h_z / sig + h_F * f + h_f * fp + h_s / D
    adj = dict(F=h_F, f=h_f, a=h_a, b=h_b, u=h_u, sig=h_sig, xi=h_xi, y=h_y)
    return H, h, adj


def _beta_parts(s, c1, c2):
    p = betainc(c1, c2, s)
    fb = beta_pdf(c1, c2, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        dfb = np.where((s > 0) & (s < 1), fb * ((c1 - 1) / s - (c2 - 1) / (1 - s)), 0.0)
    return np.asarray(p, float), np.asarray(fb, float), dfb


def _tail_logpdf(y, u, sig, xi, grad):
    z = (y - u) / sig
    logS, logt, dS_dz, dS_dxi, dt_dz, dt_dxi = _gp_terms(z, xi)
    lh = np.where(np.isfinite(logS), logS - np.log(sig) - logt, -np.inf)
    if not grad:
        return logS, lh, None
    lz = dS_dz - dt_dz
    adj = dict(u=-lz / sig, sig=-1.0 / sig - lz * z / sig, xi=dS_dxi - dt_dxi)
    return logS, lh, adj


def bgp_eval(knots, d, W, xi, Y, pa, pb, c1, c2):
    """cdf, survival, log density and density of the blended GP at ``Y`` (n x m)."""
    basis = _basis(knots, d)
    W = np.ascontiguousarray(W, float)
    Y = np.asarray(Y, float)
    n, m = Y.shape
    R = _Rows(basis, W, xi, pa, pb)
    rows = np.repeat(np.arange(n), m)
    y = Y.ravel()
    F, f, fp, _ = R.bulk.eval(rows, y, deriv=True)
    a, b, u, sig, xr = R.a[rows], R.b[rows], R.u[rows], R.sig[rows], R.xi[rows]
    cdf = F.copy()
    sf = 1.0 - F
    with np.errstate(divide="ignore"):
        lpdf = np.log(f)
    pdf = f.copy()
    tail = y >= b
    if tail.any():
        logS, lh, _ = _tail_logpdf(y[tail], u[tail], sig[tail], xr[tail], False)
        cdf[tail] = -np.expm1(logS)
        sf[tail] = np.exp(logS)
        lpdf[tail] = lh
        pdf[tail] = np.exp(lh)
    mid = (y > a) & ~tail
    if mid.any():
        s = (y[mid] - a[mid]) / (b[mid] - a[mid])
        p, fb, dfb = _beta_parts(s, c1, c2)
        H, h, _ = _blend(F[mid], f[mid], fp[mid], y[mid], a[mid], b[mid], u[mid],
                         sig[mid], xr[mid], p, fb, dfb, False)
        cdf[mid] = H
        sf[mid] = 1.0 - H
        pdf[mid] = h
        with np.errstate(divide="ignore", invalid="ignore"):
            lpdf[mid] = np.log(h)
    shape = (n, m)
    return cdf.reshape(shape), sf.reshape(shape), lpdf.reshape(shape), pdf.reshape(shape)


def blend_geometry(knots, d, W, xi, pa, pb):
    """Per-row ``(a, b, u_tilde, sigma_tilde)``."""
    R = _Rows(_basis(knots, d), np.ascontiguousarray(W, float), xi, pa, pb)
    return R.a, R.b, R.u, R.sig


def bgp_quantile(knots, d, W, xi, T, pa, pb, c1, c2):
    """Blended GP quantiles at levels ``T`` (n x m)."""
    basis = _basis(knots, d)
    W = np.ascontiguousarray(W, float)
    T = np.asarray(T, float)
    n, m = T.shape
    R = _Rows(basis, W, xi, pa, pb)
    rows = np.repeat(np.arange(n), m)
    t = T.ravel()
    out = np.empty_like(t)
    low = t <= pa
    if low.any():
        out[low] = _bulk_quantile_flat(R.bulk, _knot_cdf(basis, W), rows[low], t[low])
    high = t >= pb
    if high.any():
        r = rows[high]
        with np.errstate(divide="ignore"):
            L = -np.log1p(-t[high])
        q, _ = gp_q(R.xi[r], L)
        xr = R.xi[r]
        endpoint = np.where(xr < 0, -1.0 / np.where(xr < 0, xr, -1.0), np.inf)
        q = np.where(np.isinf(L), endpoint, q)
        out[high] = R.u[r] + R.sig[r] * q
    mid = ~low & ~high
    if mid.any():
        r, tt = rows[mid], t[mid]
        lo, hi = R.a[r].copy(), R.b[r].copy()
        y = lo + (tt - pa) / (pb - pa) * (hi - lo)
        active = np.ones(tt.shape, bool)
        for _ in range(200):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            ri, yi = r[idx], y[idx]
            F, f, fp, _ = R.bulk.eval(ri, yi, deriv=True)
            s = (yi - R.a[ri]) / (R.b[ri] - R.a[ri])
            p, fb, dfb = _beta_parts(s, c1, c2)
            H, h, _ = _blend(F, f, fp, yi, R.a[ri], R.b[ri], R.u[ri], R.sig[ri], R.xi[ri],
                             p, fb, dfb, False)
            err = H - tt[idx]
            below = err < 0
            lo[idx] = np.where(below, yi, lo[idx])
            hi[idx] = np.where(below, hi[idx], yi)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = yi - err / h
            ok = (h > 0) & (newton >= lo[idx]) & (newton <= hi[idx])
            ynew = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
            conv = np.abs(err) <= 1e-15
            ynew = np.where(conv, yi, ynew)
            y[idx] = ynew
            done = conv | (np.abs(ynew - yi) <= 1e-16) | \
                (hi[idx] - lo[idx] <= 4e-16 * hi[idx])
            active[idx[done]] = False
        if active.any():
            raise RuntimeError("blended quantile did not converge; H is not monotone")
        out[mid] = y
    return out.reshape(n, m)


# ---------------------------------------------------------------------------
# Penalized negative log-likelihood


def _to_abxi(R, rows, adj, gA, gB, gX):
    """Push adjoints of (u, sigma, xi) onto (a, b, xi)."""
    gu, gs = adj["u"], adj["sig"]
    np.add.at(gA, rows, gu * R.u_a[rows] + gs * R.sig_a[rows] + adj.get("a", 0.0))
    np.add.at(gB, rows, gu * R.u_b[rows] + gs * R.sig_b[rows] + adj.get("b", 0.0))
    np.add.at(gX, rows, gu * R.u_xi[rows] + gs * R.sig_xi[rows] + adj["xi"])


def spqrx_loss(knots, d, W, xi, y, pa, pb, c1, c2, lam, grid_size, grad=True):
    """Per-row negative log-likelihood, validity penalty and their gradients.

    Returns ``(nll, pen, dW, dxi)`` where the row loss is ``nll + lam * pen``
    and ``dW``/``dxi`` are its gradients (``None`` when ``grad`` is false).
    """
    basis = _basis(knots, d)
    W = np.ascontiguousarray(W, float)
    y = np.asarray(y, float)
    n, K = W.shape
    if lam > 0 and grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    if y.shape != (n,):
        raise ValueError("y must have one entry per row")
    R = _Rows(basis, W, xi, pa, pb)
    bulk = R.bulk
    rows = np.arange(n)
    dW = np.zeros((n, K))
    P = np.zeros((n, K + 1))
    gA, gB, gX = np.zeros(n), np.zeros(n), np.zeros(n)

    F, f, fp, local = bulk.eval(rows, y, deriv=True)
    nll = np.empty(n)
    gF, gf = np.zeros(n), np.zeros(n)
    low = y <= R.a
    tail = y >= R.b
    mid = ~low & ~tail
    with np.errstate(divide="ignore"):
        nll[low] = -np.log(f[low])
    gf[low] = -1.0 / f[low]
    if tail.any():
        r = rows[tail]
        _, lh, adj = _tail_logpdf(y[tail], R.u[r], R.sig[r], R.xi[r], grad)
        nll[tail] = -lh
        if grad:
            _to_abxi(R, r, {k: -v for k, v in adj.items()}, gA, gB, gX)
    if mid.any():
        r = rows[mid]
        s = (y[mid] - R.a[r]) / (R.b[r] - R.a[r])
        p, fb, dfb = _beta_parts(s, c1, c2)
        _, h, adj = _blend(F[mid], f[mid], fp[mid], y[mid], R.a[r], R.b[r], R.u[r],
                           R.sig[r], R.xi[r], p, fb, dfb, grad)
        with np.errstate(divide="ignore", invalid="ignore"):
            nll[mid] = -np.log(h)
        if grad:
            scale = -1.0 / h
            gF[mid] = adj["F"] * scale
            gf[mid] = adj["f"] * scale
            _to_abxi(R, r, {k: v * scale for k, v in adj.items()}, gA, gB, gX)
    if grad:
        bulk.scatter(dW, P, rows, local, gF, gf)

    pen = np.zeros(n)
    if lam > 0:
        G = int(grid_size)
        sg = (np.arange(2, G - 2) - 1) / (G - 3)
        pg, fbg, dfbg = _beta_parts(sg, c1, c2)
        D = R.b - R.a
        delta = D / (G - 3)
        m = sg.size
        rr = np.repeat(rows, m)
        yy = (R.a[:, None] + sg[None, :] * D[:, None]).ravel()
        Fg, fg, fpg, localg = bulk.eval(rr, yy, deriv=True)
        P_, FB_, DFB_ = np.tile(pg, n), np.tile(fbg, n), np.tile(dfbg, n)
        _, hg, _ = _blend(Fg, fg, fpg, yy, R.a[rr], R.b[rr], R.u[rr], R.sig[rr],
                          R.xi[rr], P_, FB_, DFB_, False)
        neg = np.where(hg < 0, -hg, 0.0)
        # nan (e.g. overflow) must surface as a non-finite loss
        neg = np.where(np.isnan(hg), np.nan, neg)
        pen = delta * neg.reshape(n, m).sum(axis=1)
        sel = hg < 0
        if grad and sel.any():
            rs, ys = rr[sel], yy[sel]
            Fs, fs, fps, locs = bulk.eval(rs, ys, deriv=True)
            ss = np.tile(sg, n)[sel]
            _, hs, adj = _blend(Fs, fs, fps, ys, R.a[rs], R.b[rs], R.u[rs], R.sig[rs],
                                R.xi[rs], P_[sel], FB_[sel], DFB_[sel], True)
            wgt = -lam * delta[rs]
            # grid positions move with a and b
            adj["a"] = adj["a"] + adj["y"] * (1.0 - ss)
            adj["b"] = adj["b"] + adj["y"] * ss
            scaled = {k: v * wgt for k, v in adj.items()}
            _to_abxi(R, rs, scaled, gA, gB, gX)
            bulk.scatter(dW, P, rs, locs, scaled["F"], scaled["f"])
            # d(delta)/da = -1/(G-3), d(delta)/db = 1/(G-3)
            np.add.at(gA, rs, lam * hs / (G - 3))
            np.add.at(gB, rs, -lam * hs / (G - 3))

    if not grad:
        return nll, pen, None, None
    # a and b are implicit in the weights: F(a) = p_a gives da/dw_k = -I_k(a)/f(a)
    Fa, fa, la = bulk.eval(rows, R.a)
    Fb, fbb, lb = bulk.eval(rows, R.b)
    bulk.scatter(dW, P, rows, la, -gA / fa, np.zeros(n))
    bulk.scatter(dW, P, rows, lb, -gB / fbb, np.zeros(n))
    _Bulk.finish(dW, P)
    return nll, pen, dW, gX
