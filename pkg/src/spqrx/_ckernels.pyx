# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; a line-by-line C translation of ``_pykernels``.

Every public function has the same signature and semantics as its numpy
counterpart.  Work is done row by row without temporaries, which is what makes
the penalised likelihood (one data point plus a grid of blend points per row)
cheap enough to train on.
"""

import numpy as np

from libc.math cimport exp, expm1, fabs, isnan, lgamma, log, log1p, INFINITY, NAN

cdef enum:
    MAXO = 32

cdef double XI_EPS = 1e-7


cdef struct Basis:
    const double* t
    const double* ext
    int K
    int d


cdef struct Geom:
    double a, b, u, sig, xi
    double sig_a, sig_b, sig_xi, u_a, u_b, u_xi


# ---------------------------------------------------------------------------
# Splines


cdef inline int _span(const Basis* B, double y) noexcept nogil:
    cdef int lo = 0, hi = B.K + B.d, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if B.t[mid] <= y:
            lo = mid + 1
        else:
            hi = mid
    lo -= 1
    if lo < B.d - 1:
        lo = B.d - 1
    if lo > B.K - 1:
        lo = B.K - 1
    return lo


cdef int _local(const Basis* B, double y, double* M, double* I, double* dM) noexcept nogil:
    """Local M, I (and M') at ``y``; returns the knot span."""
    cdef int d = B.d, r, s, c, i, j
    cdef double N[MAXO + 1][MAXO + 1]
    cdef double left[MAXO + 1]
    cdef double right[MAXO + 1]
    cdef double saved, temp, lo, hi
    cdef const double* ext = B.ext
    cdef const double* t = B.t
    if y < 0.0:
        y = 0.0
    if y > 1.0:
        y = 1.0
    j = _span(B, y)
    N[0][0] = 1.0
    for r in range(1, d + 1):
        left[r] = y - ext[j + 1 - r]
        right[r] = ext[j + r] - y
        saved = 0.0
        for s in range(r):
            temp = N[r - 1][s] / (right[s + 1] + left[r - s])
            N[r][s] = saved + right[s + 1] * temp
            saved = left[r - s] * temp
        N[r][r] = saved
    for c in range(d):
        i = j - d + 1 + c
        M[c] = d * N[d - 1][c] / (t[i + d] - t[i])
    saved = 0.0
    for c in range(d, -1, -1):
        saved += N[d][c]
        I[c] = saved
    if dM != NULL:
        for c in range(d):
            dM[c] = 0.0
        if d > 1:
            for c in range(d):
                i = j - d + 1 + c
                lo = N[d - 2][c - 1] / (t[i + d - 1] - t[i]) if c >= 1 else 0.0
                hi = N[d - 2][c] / (t[i + d] - t[i + 1]) if c < d - 1 else 0.0
                dM[c] = d * (d - 1) * (lo - hi) / (t[i + d] - t[i])
    return j


cdef int _bulk(const Basis* B, const double* w, const double* cw, double y,
               double* F, double* f, double* fp, double* M, double* I, double* dM) noexcept nogil:
    """Bulk cdf/pdf/pdf' of one row at ``y``; fills the local basis, returns the span."""
    cdef int d = B.d, j, c, k
    cdef double sF, sf, sfp = 0.0
    j = _local(B, y, M, I, dM)
    k = j - d
    sF = cw[k if k > 0 else 0]
    for c in range(d + 1):
        k = j - d + c
        if k >= 0:
            sF += w[k] * I[c]
    sf = 0.0
    for c in range(d):
        sf += w[j - d + 1 + c] * M[c]
        if dM != NULL:
            sfp += w[j - d + 1 + c] * dM[c]
    if y < 0.0:
        sF, sf, sfp = 0.0, 0.0, 0.0
    elif y > 1.0:
        sF, sf, sfp = 1.0, 0.0, 0.0
    F[0] = sF
    f[0] = sf
    if fp != NULL:
        fp[0] = sfp
    return j


cdef void _scatter(int d, int j, const double* M, const double* I, double* dW,
                   double* P, double gF, double gf) noexcept nogil:
    cdef int c, k
    k = j - d
    P[k if k > 0 else 0] += gF
    for c in range(d + 1):
        k = j - d + c
        if k >= 0:
            dW[k] += gF * I[c]
    for c in range(d):
        dW[j - d + 1 + c] += gf * M[c]


cdef void _knot_cdf(const Basis* B, const double* w, const double* cw, double* Fk) noexcept nogil:
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    cdef double f
    cdef int i, nb = B.K - B.d + 2
    for i in range(nb):
        _bulk(B, w, cw, B.t[B.d - 1 + i], &Fk[i], &f, NULL, M, I, NULL)
    Fk[0] = 0.0
    Fk[nb - 1] = 1.0


cdef double _bulk_quantile(const Basis* B, const double* w, const double* cw,
                           const double* Fk, double tau) noexcept nogil:
    cdef int nb = B.K - B.d + 2, lo_i = 0, hi_i = nb, mid, i, it
    cdef double lo, hi, Flo, Fhi, span, y, F, f, err, newton, ynew, step
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if Fk[mid] <= tau:
            lo_i = mid + 1
        else:
            hi_i = mid
    i = lo_i - 1
    if i < 0:
        i = 0
    if i > nb - 2:
        i = nb - 2
    lo = B.t[B.d - 1 + i]
    hi = B.t[B.d + i]
    Flo = Fk[i]
    Fhi = Fk[i + 1]
    if tau == Flo:
        return lo
    span = Fhi - Flo if Fhi > Flo else 1.0
    step = (tau - Flo) / span
    if step < 0.0:
        step = 0.0
    if step > 1.0:
        step = 1.0
    y = lo + step * (hi - lo)
    for it in range(100):
        _bulk(B, w, cw, y, &F, &f, NULL, M, I, NULL)
        err = F - tau
        if err < 0:
            lo = y
        else:
            hi = y
        if err == 0:
            break
        newton = y - err / f
        if f > 0 and newton >= lo and newton <= hi:
            ynew = newton
        else:
            ynew = 0.5 * (lo + hi)
        step = fabs(ynew - y)
        y = ynew
        if step <= 1e-15 or hi - lo <= 1e-16:
            break
    return y


# ---------------------------------------------------------------------------
# Incomplete beta


cdef double _betacf(double a, double b, double x) noexcept nogil:
    cdef double tiny = 1e-300, qab = a + b, qap = a + 1.0, qam = a - 1.0
    cdef double c = 1.0, dd, h, aa, delta
    cdef int m, m2
    dd = 1.0 - qab * x / qap
    if fabs(dd) < tiny:
        dd = tiny
    dd = 1.0 / dd
    h = dd
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        dd = 1.0 + aa * dd
        if fabs(dd) < tiny:
            dd = tiny
        c = 1.0 + aa / c
        if fabs(c) < tiny:
            c = tiny
        dd = 1.0 / dd
        h *= dd * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        dd = 1.0 + aa * dd
        if fabs(dd) < tiny:
            dd = tiny
        c = 1.0 + aa / c
        if fabs(c) < tiny:
            c = tiny
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if fabs(delta - 1.0) <= 1e-16:
            break
    return h


cdef double _betainc(double c1, double c2, double x) noexcept nogil:
    cdef double lbeta, front
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbeta = lgamma(c1) + lgamma(c2) - lgamma(c1 + c2)
    front = exp(c1 * log(x) + c2 * log1p(-x) - lbeta)
    if x > (c1 + 1.0) / (c1 + c2 + 2.0):
        return 1.0 - front * _betacf(c2, c1, 1.0 - x) / c2
    return front * _betacf(c1, c2, x) / c1


cdef void _beta_parts(double c1, double c2, double s, double* p, double* fb,
                      double* dfb) noexcept nogil:
    p[0] = _betainc(c1, c2, s)
    if s > 0.0 and s < 1.0:
        fb[0] = exp((c1 - 1) * log(s) + (c2 - 1) * log1p(-s)
                    - (lgamma(c1) + lgamma(c2) - lgamma(c1 + c2)))
        dfb[0] = fb[0] * ((c1 - 1) / s - (c2 - 1) / (1 - s))
    else:
        fb[0] = 0.0
        dfb[0] = 0.0


# ---------------------------------------------------------------------------
# GP pieces


cdef void _gp_q(double xi, double L, double* q, double* dq) noexcept nogil:
    cdef double v, e
    if fabs(xi) < XI_EPS:
        q[0] = L
        dq[0] = 0.5 * L * L
        return
    v = xi * L
    e = expm1(v)
    q[0] = e / xi
    if fabs(v) < 1e-3:
        dq[0] = L * L * (0.5 + v * (1.0 / 3 + v * (1.0 / 8 + v * (1.0 / 30 + v / 144))))
    else:
        dq[0] = (L * (e + 1.0) * xi - e) / (xi * xi)


cdef void _gp_terms(double z, double xi, double* logS, double* logt, double* dS_dz,
                    double* dS_dxi, double* dt_dz, double* dt_dxi) noexcept nogil:
    cdef double v, t, l1p
    if fabs(xi) < XI_EPS:
        logS[0] = -z
        logt[0] = 0.0
        dS_dz[0] = -1.0
        dS_dxi[0] = 0.5 * z * z
        dt_dz[0] = 0.0
        dt_dxi[0] = z
        return
    v = xi * z
    t = 1.0 + v
    l1p = log1p(v) if v > -1.0 else (-INFINITY if v == -1.0 else NAN)
    logS[0] = -l1p / xi if t > 0 else -INFINITY
    logt[0] = l1p
    dS_dz[0] = -1.0 / t
    if fabs(v) < 1e-3:
        dS_dxi[0] = z * z * (0.5 + v * (-2.0 / 3 + v * (0.75 + v * (-0.8 + v * 5.0 / 6))))
    else:
        dS_dxi[0] = l1p / (xi * xi) - z / (xi * t)
    dt_dz[0] = xi / t
    dt_dxi[0] = z / t


cdef enum:
    A_F = 0
    A_f = 1
    A_a = 2
    A_b = 3
    A_u = 4
    A_sig = 5
    A_xi = 6
    A_y = 7


cdef double _blend(double F, double f, double fp, double y, const Geom* g, double p,
                   double fb, double dfb, double* H_out, double* adj) noexcept nogil:
    """Blended density on (a, b); fills ``adj`` (8 adjoints) unless NULL."""
    cdef double D = g.b - g.a, s, z, logS, logt, dS_dz, dS_dxi, dt_dz, dt_dxi
    cdef double S, lG, gG, lF, gg, pd, H, h
    cdef double h_lF, h_lG, h_p, h_pd, h_gG, h_g, h_F, h_f, dlG, h_logS, h_logt
    cdef double h_sig, h_z, h_xi, h_u, h_s, h_D
    s = (y - g.a) / D
    z = (y - g.u) / g.sig
    _gp_terms(z, g.xi, &logS, &logt, &dS_dz, &dS_dxi, &dt_dz, &dt_dxi)
    S = exp(logS)
    lG = log(-expm1(logS))
    gG = exp(logS - log(g.sig) - logt - lG)
    lF = log(F)
    gg = f / F
    pd = fb / D
    H = exp((1 - p) * lF + p * lG)
    h = H * (pd * (lG - lF) + p * gG + (1 - p) * gg)
    H_out[0] = H
    if adj == NULL:
        return h
    h_lF = h * (1 - p) - H * pd
    h_lG = h * p + H * pd
    h_p = h * (lG - lF) + H * (gG - gg)
    h_pd = H * (lG - lF)
    h_gG = H * p
    h_g = H * (1 - p)
    h_F = h_lF / F - h_g * f / (F * F)
    h_f = h_g / F
    dlG = -S / (1.0 - S)
    h_logS = h_lG * dlG + h_gG * gG * (1.0 - dlG)
    h_logt = -h_gG * gG
    h_sig = -h_gG * gG / g.sig
    h_z = h_logS * dS_dz + h_logt * dt_dz
    h_xi = h_logS * dS_dxi + h_logt * dt_dxi
    h_u = -h_z / g.sig
    h_sig = h_sig - h_z * z / g.sig
    h_s = h_p * fb + h_pd * dfb / D
    h_D = -h_pd * fb / (D * D)
    adj[A_F] = h_F
    adj[A_f] = h_f
    adj[A_a] = h_s * (s - 1.0) / D - h_D
    adj[A_b] = -h_s * s / D + h_D
    adj[A_u] = h_u
    adj[A_sig] = h_sig
    adj[A_xi] = h_xi
    adj[A_y] = h_z / g.sig + h_F * f + h_f * fp + h_s / D
    return h


cdef void _geometry(const Basis* B, const double* w, const double* cw, double* Fk,
                    double xi, double pa, double pb, double La, double Lb, Geom* g) noexcept nogil:
    cdef double qa, dqa, qb, dqb, den
    _knot_cdf(B, w, cw, Fk)
    g.a = _bulk_quantile(B, w, cw, Fk, pa)
    g.b = _bulk_quantile(B, w, cw, Fk, pb)
    g.xi = xi
    _gp_q(xi, La, &qa, &dqa)
    _gp_q(xi, Lb, &qb, &dqb)
    den = qb - qa
    g.sig = (g.b - g.a) / den
    g.u = g.a - g.sig * qa
    g.sig_a = -1.0 / den
    g.sig_b = 1.0 / den
    g.sig_xi = -g.sig * (dqb - dqa) / den
    g.u_a = 1.0 - qa * g.sig_a
    g.u_b = -qa * g.sig_b
    g.u_xi = -dqa * g.sig - qa * g.sig_xi


cdef double _tail_logpdf(double y, const Geom* g, double* logS_out, double* adj) noexcept nogil:
    """GP log density above ``b``; ``adj`` receives (u, sig, xi) partials unless NULL."""
    cdef double z, logS, logt, dS_dz, dS_dxi, dt_dz, dt_dxi, lz, lh
    z = (y - g.u) / g.sig
    _gp_terms(z, g.xi, &logS, &logt, &dS_dz, &dS_dxi, &dt_dz, &dt_dxi)
    logS_out[0] = logS
    lh = logS - log(g.sig) - logt if logS > -INFINITY else -INFINITY
    if adj != NULL:
        lz = dS_dz - dt_dz
        adj[0] = -lz / g.sig
        adj[1] = -1.0 / g.sig - lz * z / g.sig
        adj[2] = dS_dxi - dt_dxi
    return lh


# ---------------------------------------------------------------------------
# Python-facing wrappers


cdef class _Ctx:
    """Owns the contiguous knot buffers behind a ``Basis``."""
    cdef const double[::1] t
    cdef const double[::1] ext
    cdef Basis B

    def __init__(self, knots, int d):
        self.t = np.ascontiguousarray(knots, dtype=float)
        self.ext = np.append(self.t, 1.0)
        if d < 1 or d + 1 > MAXO:
            raise ValueError(f"spline order must lie in [1, {MAXO - 1}]")
        self.B.t = &self.t[0]
        self.B.ext = &self.ext[0]
        self.B.K = self.t.shape[0] - d
        self.B.d = d


def _cumw(W):
    n = W.shape[0]
    return np.ascontiguousarray(np.hstack([np.zeros((n, 1)), np.cumsum(W, axis=1)]))


def _prep(knots, d, W):
    ctx = _Ctx(knots, d)
    W = np.ascontiguousarray(W, dtype=float)
    if W.ndim != 2 or W.shape[1] != ctx.B.K:
        raise ValueError("weights must be (n, num_basis)")
    return ctx, W, _cumw(W)


def bulk_eval(knots, int d, W, Y):
    """Bulk cdf and density at ``Y`` (n x m) for each row of ``W``."""
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=float)
    cdef Py_ssize_t n = Yv.shape[0], m = Yv.shape[1], r, i
    F = np.empty((n, m))
    f = np.empty((n, m))
    cdef double[:, ::1] Fv = F, fv = f
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    with nogil:
        for r in range(n):
            for i in range(m):
                _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], Yv[r, i], &Fv[r, i], &fv[r, i],
                      NULL, M, I, NULL)
    return F, f


def spqr_quantile(knots, int d, W, T):
    """Bulk quantiles at levels ``T`` (n x m), solved to machine precision."""
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef const double[:, ::1] Tv = np.ascontiguousarray(T, dtype=float)
    cdef Py_ssize_t n = Tv.shape[0], m = Tv.shape[1], r, i
    Q = np.empty((n, m))
    cdef double[:, ::1] Qv = Q
    cdef double[::1] Fk = np.empty(ctx.B.K - d + 2)
    with nogil:
        for r in range(n):
            _knot_cdf(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0])
            for i in range(m):
                Qv[r, i] = _bulk_quantile(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], Tv[r, i])
    return Q


def _lvals(double pa, double pb):
    if not 0.0 < pa < pb < 1.0:
        raise ValueError("need 0 < p_a < p_b < 1")
    return -log1p(-pa), -log1p(-pb)


def blend_geometry(knots, int d, W, xi, double pa, double pb):
    """Per-row ``(a, b, u_tilde, sigma_tilde)``."""
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef double La, Lb
    La, Lb = _lvals(pa, pb)
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef const double[::1] xv = np.ascontiguousarray(np.broadcast_to(xi, (W.shape[0],)), dtype=float)
    cdef Py_ssize_t n = Wv.shape[0], r
    out = np.empty((4, n))
    cdef double[:, ::1] ov = out
    cdef double[::1] Fk = np.empty(ctx.B.K - d + 2)
    cdef Geom g
    with nogil:
        for r in range(n):
            _geometry(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], xv[r], pa, pb, La, Lb, &g)
            ov[0, r] = g.a
            ov[1, r] = g.b
            ov[2, r] = g.u
            ov[3, r] = g.sig
    return out[0], out[1], out[2], out[3]


def bgp_eval(knots, int d, W, xi, Y, double pa, double pb, double c1, double c2):
    """cdf, survival, log density and density of the blended GP at ``Y`` (n x m)."""
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef double La, Lb
    La, Lb = _lvals(pa, pb)
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef const double[::1] xv = np.ascontiguousarray(np.broadcast_to(xi, (W.shape[0],)), dtype=float)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=float)
    cdef Py_ssize_t n = Yv.shape[0], m = Yv.shape[1], r, i
    out = np.empty((4, n, m))
    cdef double[:, :, ::1] ov = out
    cdef double[::1] Fk = np.empty(ctx.B.K - d + 2)
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    cdef double dM[MAXO]
    cdef Geom g
    cdef double y, F, f, fp, logS, lh, s, p, fb, dfb, H, h
    with nogil:
        for r in range(n):
            _geometry(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], xv[r], pa, pb, La, Lb, &g)
            for i in range(m):
                y = Yv[r, i]
                if y >= g.b:
                    lh = _tail_logpdf(y, &g, &logS, NULL)
                    ov[0, r, i] = -expm1(logS)
                    ov[1, r, i] = exp(logS)
                    ov[2, r, i] = lh
                    ov[3, r, i] = exp(lh)
                    continue
                _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], y, &F, &f, &fp, M, I, dM)
                if y > g.a:
                    s = (y - g.a) / (g.b - g.a)
                    _beta_parts(c1, c2, s, &p, &fb, &dfb)
                    h = _blend(F, f, fp, y, &g, p, fb, dfb, &H, NULL)
                    ov[0, r, i] = H
                    ov[1, r, i] = 1.0 - H
                    ov[2, r, i] = log(h) if h > 0 else (-INFINITY if h == 0 else NAN)
                    ov[3, r, i] = h
                else:
                    ov[0, r, i] = F
                    ov[1, r, i] = 1.0 - F
                    ov[2, r, i] = log(f) if f > 0 else -INFINITY
                    ov[3, r, i] = f
    return out[0], out[1], out[2], out[3]


cdef int _mid_quantile(const Basis* B, const double* w, const double* cw, const Geom* g,
                       double t, double pa, double pb, double c1, double c2,
                       double* out) noexcept nogil:
    cdef double lo = g.a, hi = g.b, y, yi, F, f, fp, s, p, fb, dfb, H, h, err, newton
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    cdef double dM[MAXO]
    cdef int it
    y = lo + (t - pa) / (pb - pa) * (hi - lo)
    for it in range(200):
        yi = y
        _bulk(B, w, cw, yi, &F, &f, &fp, M, I, dM)
        s = (yi - g.a) / (g.b - g.a)
        _beta_parts(c1, c2, s, &p, &fb, &dfb)
        h = _blend(F, f, fp, yi, g, p, fb, dfb, &H, NULL)
        err = H - t
        if err < 0:
            lo = yi
        else:
            hi = yi
        if fabs(err) <= 1e-15:
            out[0] = yi
            return 0
        newton = yi - err / h
        if h > 0 and newton >= lo and newton <= hi:
            y = newton
        else:
            y = 0.5 * (lo + hi)
        if fabs(y - yi) <= 1e-16 or hi - lo <= 4e-16 * hi:
            out[0] = y
            return 0
    return 1


def bgp_quantile(knots, int d, W, xi, T, double pa, double pb, double c1, double c2):
    """Blended GP quantiles at levels ``T`` (n x m)."""
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef double La, Lb
    La, Lb = _lvals(pa, pb)
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef const double[::1] xv = np.ascontiguousarray(np.broadcast_to(xi, (W.shape[0],)), dtype=float)
    cdef const double[:, ::1] Tv = np.ascontiguousarray(T, dtype=float)
    cdef Py_ssize_t n = Tv.shape[0], m = Tv.shape[1], r, i
    Q = np.empty((n, m))
    cdef double[:, ::1] Qv = Q
    cdef double[::1] Fk = np.empty(ctx.B.K - d + 2)
    cdef Geom g
    cdef double t, L, q, dq
    cdef int failed = 0
    with nogil:
        for r in range(n):
            _geometry(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], xv[r], pa, pb, La, Lb, &g)
            for i in range(m):
                t = Tv[r, i]
                if t <= pa:
                    Qv[r, i] = _bulk_quantile(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], t)
                elif t >= pb:
                    if t >= 1.0:
                        Qv[r, i] = g.u - g.sig / g.xi if g.xi < 0 else INFINITY
                    else:
                        L = -log1p(-t)
                        _gp_q(g.xi, L, &q, &dq)
                        Qv[r, i] = g.u + g.sig * q
                else:
                    failed |= _mid_quantile(&ctx.B, &Wv[r, 0], &cwv[r, 0], &g, t, pa, pb,
                                            c1, c2, &Qv[r, i])
    if failed:
        raise RuntimeError("blended quantile did not converge; H is not monotone")
    return Q


cdef inline void _push(const Geom* g, double gu, double gs, double ga, double gb, double gx,
                       double* gA, double* gB, double* gX) noexcept nogil:
    gA[0] += gu * g.u_a + gs * g.sig_a + ga
    gB[0] += gu * g.u_b + gs * g.sig_b + gb
    gX[0] += gu * g.u_xi + gs * g.sig_xi + gx


def spqrx_loss(knots, int d, W, xi, y, double pa, double pb, double c1, double c2,
               double lam, int grid_size, bint grad=True):
    """Per-row negative log-likelihood, validity penalty and their gradients.

    Returns ``(nll, pen, dW, dxi)`` where the row loss is ``nll + lam * pen``
    and ``dW``/``dxi`` are its gradients (``None`` when ``grad`` is false).
    """
    cdef _Ctx ctx
    ctx, W, cw = _prep(knots, d, W)
    cdef double La, Lb
    La, Lb = _lvals(pa, pb)
    cdef int G = grid_size, K = ctx.B.K
    if lam > 0 and G < 16:
        raise ValueError("grid_size must be at least 16")
    cdef const double[:, ::1] Wv = W, cwv = cw
    cdef Py_ssize_t n = Wv.shape[0], r, k
    cdef const double[::1] xv = np.ascontiguousarray(np.broadcast_to(xi, (n,)), dtype=float)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=float)
    if yv.shape[0] != n:
        raise ValueError("y must have one entry per row")
    nll = np.empty(n)
    pen = np.zeros(n)
    dW = np.zeros((n, K))
    dxi = np.zeros(n)
    cdef double[::1] nllv = nll, penv = pen, dxv = dxi
    cdef double[:, ::1] dWv = dW
    cdef double[::1] Fk = np.empty(K - d + 2)
    cdef double[::1] P = np.empty(K + 1)
    # beta weights on the fixed relative grid
    cdef int m = G - 4 if lam > 0 else 0, gi
    cdef double[::1] sg = np.empty(max(m, 1)), pg = np.empty(max(m, 1))
    cdef double[::1] fbg = np.empty(max(m, 1)), dfbg = np.empty(max(m, 1))
    for gi in range(m):
        sg[gi] = (gi + 1.0) / (G - 3)
        _beta_parts(c1, c2, sg[gi], &pg[gi], &fbg[gi], &dfbg[gi])
    cdef double M[MAXO]
    cdef double I[MAXO + 1]
    cdef double dM[MAXO]
    cdef double adj[8]
    cdef double tadj[3]
    cdef Geom g
    cdef int j
    cdef double yy, F, f, fp, logS, lh, s, p, fb, dfb, H, h, sc, gA, gB, gX
    cdef double D, delta, neg, wgt, acc
    cdef double* adjp
    with nogil:
        for r in range(n):
            _geometry(&ctx.B, &Wv[r, 0], &cwv[r, 0], &Fk[0], xv[r], pa, pb, La, Lb, &g)
            gA = 0.0
            gB = 0.0
            gX = 0.0
            for k in range(K + 1):
                P[k] = 0.0
            yy = yv[r]
            j = _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], yy, &F, &f, &fp, M, I, dM)
            if yy <= g.a:
                nllv[r] = -log(f) if f > 0 else INFINITY
                if grad:
                    _scatter(d, j, M, I, &dWv[r, 0], &P[0], 0.0, -1.0 / f)
            elif yy >= g.b:
                lh = _tail_logpdf(yy, &g, &logS, <double*>tadj if grad else NULL)
                nllv[r] = -lh
                if grad:
                    _push(&g, -tadj[0], -tadj[1], 0.0, 0.0, -tadj[2], &gA, &gB, &gX)
            else:
                s = (yy - g.a) / (g.b - g.a)
                _beta_parts(c1, c2, s, &p, &fb, &dfb)
                adjp = adj if grad else NULL
                h = _blend(F, f, fp, yy, &g, p, fb, dfb, &H, adjp)
                nllv[r] = -log(h) if h > 0 else (INFINITY if h == 0 else NAN)
                if grad:
                    sc = -1.0 / h
                    _push(&g, adj[A_u] * sc, adj[A_sig] * sc, adj[A_a] * sc, adj[A_b] * sc,
                          adj[A_xi] * sc, &gA, &gB, &gX)
                    _scatter(d, j, M, I, &dWv[r, 0], &P[0], adj[A_F] * sc, adj[A_f] * sc)

            if m > 0:
                D = g.b - g.a
                delta = D / (G - 3)
                acc = 0.0
                for gi in range(m):
                    yy = g.a + sg[gi] * D
                    j = _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], yy, &F, &f, &fp, M, I, dM)
                    h = _blend(F, f, fp, yy, &g, pg[gi], fbg[gi], dfbg[gi], &H, NULL)
                    if isnan(h):
                        acc = NAN
                    elif h < 0:
                        acc -= h
                        if grad:
                            _blend(F, f, fp, yy, &g, pg[gi], fbg[gi], dfbg[gi], &H, adj)
                            wgt = -lam * delta
                            # grid positions move with a and b
                            adj[A_a] += adj[A_y] * (1.0 - sg[gi])
                            adj[A_b] += adj[A_y] * sg[gi]
                            _push(&g, adj[A_u] * wgt, adj[A_sig] * wgt, adj[A_a] * wgt,
                                  adj[A_b] * wgt, adj[A_xi] * wgt, &gA, &gB, &gX)
                            _scatter(d, j, M, I, &dWv[r, 0], &P[0], adj[A_F] * wgt,
                                     adj[A_f] * wgt)
                            gA += lam * h / (G - 3)
                            gB -= lam * h / (G - 3)
                penv[r] = delta * acc

            if grad:
                # a and b are implicit in the weights: da/dw_k = -I_k(a)/f(a)
                j = _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], g.a, &F, &f, NULL, M, I, NULL)
                _scatter(d, j, M, I, &dWv[r, 0], &P[0], -gA / f, 0.0)
                j = _bulk(&ctx.B, &Wv[r, 0], &cwv[r, 0], g.b, &F, &f, NULL, M, I, NULL)
                _scatter(d, j, M, I, &dWv[r, 0], &P[0], -gB / f, 0.0)
                acc = 0.0
                for k in range(K - 1, -1, -1):
                    acc += P[k + 1]
                    dWv[r, k] += acc
                dxv[r] = gX
    if not grad:
        return nll, pen, None, None
    return nll, pen, dW, dxi
