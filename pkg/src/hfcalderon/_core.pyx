# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every function here has a numpy twin in :mod:`hfcalderon._fallback` with the
same signature; :mod:`hfcalderon._backend` chooses between them at import.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, exp, log, cos, sin, fabs, M_PI
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memset

cnp.import_array()

# metric kinds, kept in sync with geometry.MetricSpec._kernel_args
DEF KIND_CONST = 0
DEF KIND_SPLINE = 1
DEF KIND_EXPQUAD = 2
DEF KIND_HYPERBOLIC = 3
DEF KIND_BUMP = 4


cdef struct Spline:
    const double* coef
    Py_ssize_t n0
    Py_ssize_t n1
    Py_ssize_t n2
    double o0
    double o1
    double o2
    double inv_h
    int order


cdef inline Py_ssize_t _mirror(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t period
    if n == 1:
        return 0
    period = 2 * (n - 1)
    if i < 0:
        i = -i
    i = i % period
    if i >= n:
        i = period - i
    return i


cdef void _basis(double t, int p, double* b0, double* b1, double* b2) noexcept nogil:
    """Uniform B-spline basis of odd degree p on one knot span, with derivatives."""
    cdef double table[7][8]
    cdef double left[8]
    cdef double right[8]
    cdef double saved, temp
    cdef int j, r
    table[0][0] = 1.0
    for j in range(1, p + 1):
        left[j] = t + j - 1.0
        right[j] = j - t
        saved = 0.0
        for r in range(j):
            table[j][r] = 0.0
        for r in range(j):
            temp = table[j - 1][r] / j
            table[j][r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        table[j][j] = saved
    for r in range(p + 1):
        b0[r] = table[p][r]
        b1[r] = 0.0
        b2[r] = 0.0
    if p >= 1:
        for r in range(p + 1):
            if r >= 1:
                b1[r] += table[p - 1][r - 1]
            if r <= p - 1:
                b1[r] -= table[p - 1][r]
    if p >= 2:
        for r in range(p + 1):
            if r >= 2:
                b2[r] += table[p - 2][r - 2]
            if 1 <= r <= p - 1:
                b2[r] -= 2.0 * table[p - 2][r - 1]
            if r <= p - 2:
                b2[r] += table[p - 2][r]


cdef void _spline_eval(Spline* s, double x0, double x1, double x2, int nd,
                       double* out) noexcept nogil:
    """Value, gradient and Hessian (xx, xy, xz, yy, yz, zz) in physical units."""
    cdef int p = s.order
    cdef int q = p + 1
    cdef double u0 = (x0 - s.o0) * s.inv_h
    cdef double u1 = (x1 - s.o1) * s.inv_h
    cdef double u2 = (x2 - s.o2) * s.inv_h
    cdef double m0 = floor(u0)
    cdef double m1 = floor(u1)
    cdef double m2 = floor(u2)
    cdef double bx0[8]
    cdef double bx1[8]
    cdef double bx2[8]
    cdef double by0[8]
    cdef double by1[8]
    cdef double by2[8]
    cdef double bz0[8]
    cdef double bz1[8]
    cdef double bz2[8]
    cdef Py_ssize_t ix[8]
    cdef Py_ssize_t iy[8]
    cdef Py_ssize_t iz[8]
    cdef Py_ssize_t half = (p - 1) // 2
    cdef int i, j, k
    cdef double c, s0, s1, s2
    cdef double t00, t10, t01, t20, t11, t02
    cdef const double* row
    cdef double ih = s.inv_h
    _basis(u0 - m0, p, bx0, bx1, bx2)
    _basis(u1 - m1, p, by0, by1, by2)
    _basis(u2 - m2, p, bz0, bz1, bz2)
    for i in range(q):
        ix[i] = _mirror(<Py_ssize_t>m0 - half + i, s.n0)
        iy[i] = _mirror(<Py_ssize_t>m1 - half + i, s.n1)
        iz[i] = _mirror(<Py_ssize_t>m2 - half + i, s.n2)
    for k in range(10):
        out[k] = 0.0
    for i in range(q):
        t00 = 0.0; t10 = 0.0; t01 = 0.0; t20 = 0.0; t11 = 0.0; t02 = 0.0
        for j in range(q):
            row = s.coef + (ix[i] * s.n1 + iy[j]) * s.n2
            s0 = 0.0; s1 = 0.0; s2 = 0.0
            if nd == 0:
                for k in range(q):
                    s0 += row[iz[k]] * bz0[k]
                t00 += by0[j] * s0
            else:
                for k in range(q):
                    c = row[iz[k]]
                    s0 += c * bz0[k]
                    s1 += c * bz1[k]
                    s2 += c * bz2[k]
                t00 += by0[j] * s0
                t10 += by1[j] * s0
                t01 += by0[j] * s1
                if nd >= 2:
                    t20 += by2[j] * s0
                    t11 += by1[j] * s1
                    t02 += by0[j] * s2
        out[0] += bx0[i] * t00
        if nd >= 1:
            out[1] += bx1[i] * t00
            out[2] += bx0[i] * t10
            out[3] += bx0[i] * t01
        if nd >= 2:
            out[4] += bx2[i] * t00
            out[5] += bx1[i] * t10
            out[6] += bx1[i] * t01
            out[7] += bx0[i] * t20
            out[8] += bx0[i] * t11
            out[9] += bx0[i] * t02
    if nd >= 1:
        out[1] *= ih; out[2] *= ih; out[3] *= ih
    if nd >= 2:
        for k in range(4, 10):
            out[k] *= ih * ih


cdef Spline _make_spline(const double[:, :, ::1] coef, const double[::1] origin,
                         double spacing, int order):
    cdef Spline s
    s.coef = &coef[0, 0, 0]
    s.n0 = coef.shape[0]
    s.n1 = coef.shape[1]
    s.n2 = coef.shape[2]
    s.o0 = origin[0]
    s.o1 = origin[1]
    s.o2 = origin[2]
    s.inv_h = 1.0 / spacing
    s.order = order
    return s


def bspline_eval(const double[:, :, ::1] coef, const double[::1] origin, double spacing,
                 int order, const double[:, ::1] pts, int nderiv):
    """Evaluate a tensor B-spline: returns (m, 10) rows [f, fx, fy, fz, fxx, fxy, fxz, fyy, fyz, fzz]."""
    cdef Py_ssize_t m = pts.shape[0], i, k
    cdef Spline s = _make_spline(coef, origin, spacing, order)
    out = np.zeros((m, 10))
    cdef double[:, ::1] o = out
    cdef double buf[10]
    with nogil:
        for i in range(m):
            _spline_eval(&s, pts[i, 0], pts[i, 1], pts[i, 2], nderiv, buf)
            for k in range(10):
                o[i, k] = buf[k]
    return out


# ---------------------------------------------------------------------------
# conformal metric: phi = log c and its derivatives

cdef void _phi(int kind, const double* prm, Spline* s, double x0, double x1, double x2,
               int nd, double* out) noexcept nogil:
    cdef double d0, d1, d2, r2, den, a, k, amp, ell, e, c, gc0, gc1, gc2
    cdef int i
    if kind == KIND_SPLINE:
        _spline_eval(s, x0, x1, x2, nd, out)
        return
    for i in range(10):
        out[i] = 0.0
    if kind == KIND_CONST:
        out[0] = prm[0]
    elif kind == KIND_EXPQUAD:
        a = prm[0]
        d0 = x0 - prm[1]; d1 = x1 - prm[2]; d2 = x2 - prm[3]
        out[0] = a * (d0 * d0 + d1 * d1 + d2 * d2)
        out[1] = 2.0 * a * d0; out[2] = 2.0 * a * d1; out[3] = 2.0 * a * d2
        out[4] = 2.0 * a; out[7] = 2.0 * a; out[9] = 2.0 * a
    elif kind == KIND_HYPERBOLIC:
        k = prm[0]; a = prm[1]
        d0 = x0 - prm[2]; d1 = x1 - prm[3]; d2 = x2 - prm[4]
        r2 = d0 * d0 + d1 * d1 + d2 * d2
        den = a * a - r2
        out[0] = log(2.0 * a / k) - log(den)
        out[1] = 2.0 * d0 / den; out[2] = 2.0 * d1 / den; out[3] = 2.0 * d2 / den
        out[4] = 2.0 / den + 4.0 * d0 * d0 / (den * den)
        out[5] = 4.0 * d0 * d1 / (den * den)
        out[6] = 4.0 * d0 * d2 / (den * den)
        out[7] = 2.0 / den + 4.0 * d1 * d1 / (den * den)
        out[8] = 4.0 * d1 * d2 / (den * den)
        out[9] = 2.0 / den + 4.0 * d2 * d2 / (den * den)
    elif kind == KIND_BUMP:
        amp = prm[0]; ell = prm[1]
        d0 = x0 - prm[2]; d1 = x1 - prm[3]; d2 = x2 - prm[4]
        r2 = d0 * d0 + d1 * d1 + d2 * d2
        e = amp * exp(-r2 / (ell * ell))
        c = 1.0 + e
        out[0] = log(c)
        gc0 = -2.0 * e * d0 / (ell * ell)
        gc1 = -2.0 * e * d1 / (ell * ell)
        gc2 = -2.0 * e * d2 / (ell * ell)
        out[1] = gc0 / c; out[2] = gc1 / c; out[3] = gc2 / c
        den = ell * ell
        out[4] = e * (4.0 * d0 * d0 / (den * den) - 2.0 / den) / c - gc0 * gc0 / (c * c)
        out[5] = e * (4.0 * d0 * d1 / (den * den)) / c - gc0 * gc1 / (c * c)
        out[6] = e * (4.0 * d0 * d2 / (den * den)) / c - gc0 * gc2 / (c * c)
        out[7] = e * (4.0 * d1 * d1 / (den * den) - 2.0 / den) / c - gc1 * gc1 / (c * c)
        out[8] = e * (4.0 * d1 * d2 / (den * den)) / c - gc1 * gc2 / (c * c)
        out[9] = e * (4.0 * d2 * d2 / (den * den) - 2.0 / den) / c - gc2 * gc2 / (c * c)


def phi_eval(int kind, const double[::1] prm, const double[:, :, ::1] coef,
             const double[::1] origin, double spacing, int order,
             const double[:, ::1] pts, int nderiv):
    """Evaluate phi = log c with derivatives for any metric kind; (m, 10) rows."""
    cdef Py_ssize_t m = pts.shape[0], i, k
    cdef Spline s = _make_spline(coef, origin, spacing, order)
    out = np.zeros((m, 10))
    cdef double[:, ::1] o = out
    cdef double buf[10]
    with nogil:
        for i in range(m):
            _phi(kind, &prm[0], &s, pts[i, 0], pts[i, 1], pts[i, 2], nderiv, buf)
            for k in range(10):
                o[i, k] = buf[k]
    return out


cdef void _geo_rhs(int kind, const double* prm, Spline* s, const double* y, double* dy,
                   int jac) noexcept nogil:
    """Geodesic (and variational) vector field for g = exp(2 phi) delta.

    State layout: x[0:3], u[3:6], Y[6:15] (dx/dw, row-major), V[15:24] (du/dw).
    """
    cdef double f[10]
    cdef double g[3]
    cdef double H[3][3]
    cdef double u[3]
    cdef double gu, uu
    cdef double Ax[3][3]
    cdef double Au[3][3]
    cdef double Hu[3]
    cdef int i, j, k
    _phi(kind, prm, s, y[0], y[1], y[2], 2 if jac else 1, f)
    g[0] = f[1]; g[1] = f[2]; g[2] = f[3]
    u[0] = y[3]; u[1] = y[4]; u[2] = y[5]
    gu = g[0] * u[0] + g[1] * u[1] + g[2] * u[2]
    uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2]
    for i in range(3):
        dy[i] = u[i]
        dy[3 + i] = -2.0 * gu * u[i] + uu * g[i]
    if not jac:
        return
    H[0][0] = f[4]; H[0][1] = f[5]; H[0][2] = f[6]
    H[1][0] = f[5]; H[1][1] = f[7]; H[1][2] = f[8]
    H[2][0] = f[6]; H[2][1] = f[8]; H[2][2] = f[9]
    for j in range(3):
        Hu[j] = H[0][j] * u[0] + H[1][j] * u[1] + H[2][j] * u[2]
    for i in range(3):
        for j in range(3):
            Ax[i][j] = -2.0 * Hu[j] * u[i] + uu * H[i][j]
            Au[i][j] = -2.0 * g[j] * u[i] + 2.0 * u[j] * g[i]
        Au[i][i] -= 2.0 * gu
    # dY/dt = V, dV/dt = Ax Y + Au V
    for i in range(3):
        for j in range(3):
            dy[6 + 3 * i + j] = y[15 + 3 * i + j]
            dy[15 + 3 * i + j] = 0.0
            for k in range(3):
                dy[15 + 3 * i + j] += Ax[i][k] * y[6 + 3 * k + j] + Au[i][k] * y[15 + 3 * k + j]


def exp_map(int kind, const double[::1] prm, const double[:, :, ::1] coef,
            const double[::1] origin, double spacing, int order,
            const double[:, ::1] P, const double[:, ::1] Wv, int nsteps, bint jac,
            double[:, ::1] X, double[:, ::1] U, double[:, :, ::1] DX, double[:, :, ::1] DU,
            double[:, :, ::1] path, double[:, :, ::1] path_jac):
    """Fixed-step RK4 exponential map over unit time.

    Row m starts at P[m] with coordinate velocity Wv[m] / c(P[m]); the endpoint,
    final velocity and (if ``jac``) the derivatives with respect to Wv are
    written to X, U, DX, DU.  ``path`` (m, nsteps+1, 6) and ``path_jac``
    (m, nsteps+1, 9) are filled when their first dimension is nonzero.
    """
    cdef Py_ssize_t m = P.shape[0], r, i, step
    cdef int n = 24 if jac else 6
    cdef Spline s = _make_spline(coef, origin, spacing, order)
    cdef double y[24]
    cdef double tmp[24]
    cdef double k1[24]
    cdef double k2[24]
    cdef double k3[24]
    cdef double k4[24]
    cdef double f[10]
    cdef double dt = 1.0 / nsteps
    cdef double c0
    cdef bint rec = path.shape[0] > 0
    cdef bint recj = path_jac.shape[0] > 0
    cdef const double* pp = &prm[0]
    with nogil:
        for r in range(m):
            _phi(kind, pp, &s, P[r, 0], P[r, 1], P[r, 2], 0, f)
            c0 = exp(f[0])
            for i in range(24):
                y[i] = 0.0
            for i in range(3):
                y[i] = P[r, i]
                y[3 + i] = Wv[r, i] / c0
            if jac:
                y[15] = 1.0 / c0; y[19] = 1.0 / c0; y[23] = 1.0 / c0
            if rec:
                for i in range(6):
                    path[r, 0, i] = y[i]
            if recj:
                for i in range(9):
                    path_jac[r, 0, i] = y[6 + i]
            for step in range(nsteps):
                _geo_rhs(kind, pp, &s, y, k1, jac)
                for i in range(n):
                    tmp[i] = y[i] + 0.5 * dt * k1[i]
                _geo_rhs(kind, pp, &s, tmp, k2, jac)
                for i in range(n):
                    tmp[i] = y[i] + 0.5 * dt * k2[i]
                _geo_rhs(kind, pp, &s, tmp, k3, jac)
                for i in range(n):
                    tmp[i] = y[i] + dt * k3[i]
                _geo_rhs(kind, pp, &s, tmp, k4, jac)
                for i in range(n):
                    y[i] += dt * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
                if rec:
                    for i in range(6):
                        path[r, step + 1, i] = y[i]
                if recj:
                    for i in range(9):
                        path_jac[r, step + 1, i] = y[6 + i]
            for i in range(3):
                X[r, i] = y[i]
                U[r, i] = y[3 + i]
            if jac:
                for i in range(3):
                    DX[r, i, 0] = y[6 + 3 * i]
                    DX[r, i, 1] = y[7 + 3 * i]
                    DX[r, i, 2] = y[8 + 3 * i]
                    DU[r, i, 0] = y[15 + 3 * i]
                    DU[r, i, 1] = y[16 + 3 * i]
                    DU[r, i, 2] = y[17 + 3 * i]


# ---------------------------------------------------------------------------
# spheroidal moments of the Born integrand

def born_moments(const double[:, :, ::1] coef, const double[::1] origin, double spacing,
                 int order, const double[::1] wcenter, double wradius,
                 const double[:, ::1] c0, const double[:, ::1] e1, const double[:, ::1] e2,
                 const double[:, ::1] e3, const double[::1] a, const double[:, ::1] tau,
                 const double[::1] xg, const double[::1] xw, int nphi,
                 const double[:, ::1] nu1, const double[:, ::1] nu2,
                 double[:, ::1] M, double[:, ::1] Mp1, double[:, ::1] Mq1,
                 double[:, ::1] Mp2, double[:, ::1] Mq2):
    """Angular moments of W on confocal spheroids around each chord.

    For chord c with foci z = c0 - a e3 and z' = c0 + a e3 and spheroid
    parameter tau, accumulates the integral over x = cos(nu) in [-1, 1] and the
    azimuth of W, W p1, W p1 / r1, W p2, W p2 / r2, where r1, r2 are distances
    to the foci and p1 = nu1 . (z - y) / r1, p2 = nu2 . (z' - y) / r2.
    """
    cdef Py_ssize_t nc = c0.shape[0], nt = tau.shape[1], nx = xg.shape[0]
    cdef Py_ssize_t ic, it, ix, ip, d
    cdef Spline s = _make_spline(coef, origin, spacing, order)
    cdef double* cph = <double*>malloc(nphi * sizeof(double))
    cdef double* sph = <double*>malloc(nphi * sizeof(double))
    cdef double f[10]
    cdef double y[3]
    cdef double z1[3]
    cdef double z2[3]
    cdef double t, x, st, rad, aa, r1, r2, wv, p1, p2, wq, dd, rr2
    cdef double m0, mp1, mq1, mp2, mq2
    cdef double wr2 = wradius * wradius
    cdef double dphi = 2.0 * M_PI / nphi
    for ip in range(nphi):
        cph[ip] = cos(ip * dphi)
        sph[ip] = sin(ip * dphi)
    with nogil:
        for ic in range(nc):
            aa = a[ic]
            for d in range(3):
                z1[d] = c0[ic, d] - aa * e3[ic, d]
                z2[d] = c0[ic, d] + aa * e3[ic, d]
            for it in range(nt):
                t = tau[ic, it]
                st = sqrt(t * t - 1.0) if t > 1.0 else 0.0
                m0 = 0.0; mp1 = 0.0; mq1 = 0.0; mp2 = 0.0; mq2 = 0.0
                for ix in range(nx):
                    x = xg[ix]
                    rad = aa * st * sqrt(1.0 - x * x)
                    r1 = aa * (t + x)
                    r2 = aa * (t - x)
                    wq = xw[ix] * dphi
                    for ip in range(nphi):
                        rr2 = 0.0
                        for d in range(3):
                            y[d] = (c0[ic, d] + rad * (cph[ip] * e1[ic, d] + sph[ip] * e2[ic, d])
                                    + aa * t * x * e3[ic, d])
                            dd = y[d] - wcenter[d]
                            rr2 += dd * dd
                        if rr2 >= wr2:
                            continue
                        _spline_eval(&s, y[0], y[1], y[2], 0, f)
                        wv = f[0] * wq
                        if wv == 0.0:
                            continue
                        p1 = 0.0
                        p2 = 0.0
                        for d in range(3):
                            p1 += nu1[ic, d] * (z1[d] - y[d])
                            p2 += nu2[ic, d] * (z2[d] - y[d])
                        p1 /= r1
                        p2 /= r2
                        m0 += wv
                        mp1 += wv * p1
                        mq1 += wv * p1 / r1
                        mp2 += wv * p2
                        mq2 += wv * p2 / r2
                M[ic, it] = m0
                Mp1[ic, it] = mp1
                Mq1[ic, it] = mq1
                Mp2[ic, it] = mp2
                Mq2[ic, it] = mq2
    free(cph)
    free(sph)


# ---------------------------------------------------------------------------
# straight-line integrals

cdef inline double _dmin(double a, double b) noexcept nogil:
    return a if a < b else b


cdef int _clip_ball(const double* A, const double* B, const double* c, double rad,
                    double* t0, double* t1) noexcept nogil:
    """Parameter interval of the segment A + t (B - A), t in [0, 1], inside a ball."""
    cdef double d[3]
    cdef double f[3]
    cdef double aa = 0.0, bb = 0.0, cc = 0.0, disc, sq
    cdef int i
    for i in range(3):
        d[i] = B[i] - A[i]
        f[i] = A[i] - c[i]
        aa += d[i] * d[i]
        bb += 2.0 * d[i] * f[i]
        cc += f[i] * f[i]
    cc -= rad * rad
    disc = bb * bb - 4.0 * aa * cc
    if aa <= 0.0 or disc <= 0.0:
        return 0
    sq = sqrt(disc)
    t0[0] = (-bb - sq) / (2.0 * aa)
    t1[0] = (-bb + sq) / (2.0 * aa)
    if t0[0] < 0.0:
        t0[0] = 0.0
    if t1[0] > 1.0:
        t1[0] = 1.0
    return 1 if t1[0] > t0[0] else 0


cdef int _crossings(const double* ua, const double* ub, double t0, double t1,
                    double* buf, int cap) noexcept nogil:
    """Sorted parameters in (t0, t1) where the segment crosses integer planes.

    ``ua``/``ub`` are the segment ends in index units at t = 0 and t = 1.
    """
    cdef int n = 0, ax, i, j
    cdef double lo, hi, du, kk, t, key
    for ax in range(3):
        du = ub[ax] - ua[ax]
        if fabs(du) < 1e-300:
            continue
        lo = ua[ax] + t0 * du
        hi = ua[ax] + t1 * du
        if lo > hi:
            lo, hi = hi, lo
        kk = floor(lo) + 1.0
        while kk < hi and n < cap:
            t = (kk - ua[ax]) / du
            if t > t0 and t < t1:
                buf[n] = t
                n += 1
            kk += 1.0
    # insertion sort (lists are short and nearly sorted per axis)
    for i in range(1, n):
        key = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > key:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = key
    return n


def line_integrals_spline(const double[:, :, ::1] coef, const double[::1] origin,
                          double spacing, int order, const double[::1] center,
                          double radius, const double[:, ::1] A, const double[:, ::1] B,
                          const double[::1] gx, const double[::1] gw):
    """Exact integrals of a tensor spline along segments A -> B (Euclidean length).

    Segments are clipped to the support ball and split at spline knots; each
    piece is integrated with the Gauss rule (gx, gw) on [-1, 1].
    """
    cdef Py_ssize_t m = A.shape[0], r
    cdef int ng = gx.shape[0], cap = 4096, nc, seg, q, i
    cdef Spline s = _make_spline(coef, origin, spacing, order)
    cdef double* cr = <double*>malloc((cap + 2) * sizeof(double))
    cdef double ua[3]
    cdef double ub[3]
    cdef double pa[3]
    cdef double pb[3]
    cdef double cc[3]
    cdef double f[10]
    cdef double t0, t1, ta, tb, tm, hl, L, acc, tt
    cdef double ih = 1.0 / spacing
    out = np.zeros(m)
    cdef double[::1] o = out
    for i in range(3):
        cc[i] = center[i]
    with nogil:
        for r in range(m):
            for i in range(3):
                pa[i] = A[r, i]
                pb[i] = B[r, i]
            if not _clip_ball(pa, pb, cc, radius, &t0, &t1):
                continue
            L = 0.0
            for i in range(3):
                L += (pb[i] - pa[i]) * (pb[i] - pa[i])
            L = sqrt(L)
            ua[0] = (pa[0] - origin[0]) * ih
            ua[1] = (pa[1] - origin[1]) * ih
            ua[2] = (pa[2] - origin[2]) * ih
            ub[0] = (pb[0] - origin[0]) * ih
            ub[1] = (pb[1] - origin[1]) * ih
            ub[2] = (pb[2] - origin[2]) * ih
            nc = _crossings(ua, ub, t0, t1, cr + 1, cap)
            cr[0] = t0
            cr[nc + 1] = t1
            acc = 0.0
            for seg in range(nc + 1):
                ta = cr[seg]
                tb = cr[seg + 1]
                if tb <= ta:
                    continue
                tm = 0.5 * (ta + tb)
                hl = 0.5 * (tb - ta)
                for q in range(ng):
                    tt = tm + hl * gx[q]
                    _spline_eval(&s, pa[0] + tt * (pb[0] - pa[0]), pa[1] + tt * (pb[1] - pa[1]),
                                 pa[2] + tt * (pb[2] - pa[2]), 0, f)
                    acc += gw[q] * hl * f[0]
            o[r] = acc * L
    free(cr)
    return out


def ray_matrix_chords(const double[:, ::1] A, const double[:, ::1] B,
                      const double[::1] weight, const double[::1] origin, double spacing,
                      int n, const cnp.int64_t[::1] colmap, const double[::1] center,
                      double radius):
    """CSR rows of the exact line integral of a trilinear grid field along segments.

    Column j corresponds to grid node ``colmap[node]`` (nodes with -1 are not
    unknowns).  Each segment is clipped to the ball (center, radius), split at
    cell faces and integrated with 2-point Gauss per cell, which is exact for
    trilinear interpolants.  Returns (indptr, indices, data).
    """
    cdef Py_ssize_t m = A.shape[0], r, nnz = 0, capnz = 1 << 20, ncol = 0
    cdef int cap = 4096, nc, seg, q, i, a, b, c, ci
    cdef Py_ssize_t node, col, i0, i1, i2, n3 = <Py_ssize_t>n * n * n, kk
    cdef double* cr = <double*>malloc((cap + 2) * sizeof(double))
    cdef double ua[3]
    cdef double ub[3]
    cdef double pa[3]
    cdef double pb[3]
    cdef double cc[3]
    cdef double u[3]
    cdef double fr[3]
    cdef double t0, t1, ta, tb, tm, hl, L, tt, wq, wx, wy, wz
    cdef double ih = 1.0 / spacing
    cdef double gx[2]
    cdef Py_ssize_t* touched
    cdef Py_ssize_t* mark
    cdef Py_ssize_t ntouch
    cdef double* scratch
    cdef cnp.int32_t* idx = <cnp.int32_t*>malloc(capnz * sizeof(cnp.int32_t))
    cdef double* val = <double*>malloc(capnz * sizeof(double))
    gx[0] = -1.0 / sqrt(3.0)
    gx[1] = 1.0 / sqrt(3.0)
    for kk in range(n3):
        if colmap[kk] + 1 > ncol:
            ncol = colmap[kk] + 1
    scratch = <double*>malloc((ncol + 1) * sizeof(double))
    touched = <Py_ssize_t*>malloc((ncol + 1) * sizeof(Py_ssize_t))
    mark = <Py_ssize_t*>malloc((ncol + 1) * sizeof(Py_ssize_t))
    for kk in range(ncol):
        scratch[kk] = 0.0
        mark[kk] = 0
    indptr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] ip = indptr
    for i in range(3):
        cc[i] = center[i]
    with nogil:
        for r in range(m):
            ntouch = 0
            for i in range(3):
                pa[i] = A[r, i]
                pb[i] = B[r, i]
            if weight[r] != 0.0 and _clip_ball(pa, pb, cc, radius, &t0, &t1):
                L = 0.0
                for i in range(3):
                    L += (pb[i] - pa[i]) * (pb[i] - pa[i])
                L = sqrt(L)
                for i in range(3):
                    ua[i] = (pa[i] - origin[i]) * ih
                    ub[i] = (pb[i] - origin[i]) * ih
                nc = _crossings(ua, ub, t0, t1, cr + 1, cap)
                cr[0] = t0
                cr[nc + 1] = t1
                for seg in range(nc + 1):
                    ta = cr[seg]
                    tb = cr[seg + 1]
                    if tb <= ta:
                        continue
                    tm = 0.5 * (ta + tb)
                    hl = 0.5 * (tb - ta)
                    # cell of this piece, from its midpoint
                    for i in range(3):
                        u[i] = ua[i] + tm * (ub[i] - ua[i])
                    i0 = <Py_ssize_t>floor(u[0])
                    i1 = <Py_ssize_t>floor(u[1])
                    i2 = <Py_ssize_t>floor(u[2])
                    if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= n - 1 or i1 >= n - 1 or i2 >= n - 1:
                        continue
                    for q in range(2):
                        tt = tm + hl * gx[q]
                        wq = hl * L * weight[r]
                        for i in range(3):
                            u[i] = ua[i] + tt * (ub[i] - ua[i])
                        fr[0] = u[0] - i0
                        fr[1] = u[1] - i1
                        fr[2] = u[2] - i2
                        for a in range(2):
                            wx = fr[0] if a else 1.0 - fr[0]
                            for b in range(2):
                                wy = fr[1] if b else 1.0 - fr[1]
                                for c in range(2):
                                    wz = fr[2] if c else 1.0 - fr[2]
                                    node = ((i0 + a) * n + (i1 + b)) * n + (i2 + c)
                                    col = colmap[node]
                                    if col < 0:
                                        continue
                                    if mark[col] != r + 1:
                                        mark[col] = r + 1
                                        touched[ntouch] = col
                                        ntouch += 1
                                    scratch[col] += wq * wx * wy * wz
            if nnz + ntouch > capnz:
                while nnz + ntouch > capnz:
                    capnz *= 2
                idx = <cnp.int32_t*>realloc(idx, capnz * sizeof(cnp.int32_t))
                val = <double*>realloc(val, capnz * sizeof(double))
            for kk in range(ntouch):
                col = touched[kk]
                idx[nnz] = <cnp.int32_t>col
                val[nnz] = scratch[col]
                scratch[col] = 0.0
                nnz += 1
            ip[r + 1] = nnz
    indices = np.empty(nnz, dtype=np.int32)
    data = np.empty(nnz)
    cdef cnp.int32_t[::1] iv = indices
    cdef double[::1] dv = data
    for kk in range(nnz):
        iv[kk] = idx[kk]
        dv[kk] = val[kk]
    free(idx)
    free(val)
    free(cr)
    free(scratch)
    free(touched)
    free(mark)
    return indptr, indices, data


def ray_matrix_nodes(const double[:, ::1] pts, const double[::1] qw,
                     const cnp.int64_t[::1] rowptr, const double[::1] origin,
                     double spacing, int n, const cnp.int64_t[::1] colmap):
    """CSR rows from explicit quadrature nodes: row r sums qw * trilinear weights
    over nodes rowptr[r]:rowptr[r+1]."""
    cdef Py_ssize_t m = rowptr.shape[0] - 1, r, nnz = 0, capnz = 1 << 20, ncol = 0
    cdef Py_ssize_t kk, node, col, i0, i1, i2, n3 = <Py_ssize_t>n * n * n, ntouch
    cdef int a, b, c, i
    cdef double u[3]
    cdef double fr[3]
    cdef double wx, wy, wz, ih = 1.0 / spacing
    cdef Py_ssize_t* touched
    cdef Py_ssize_t* mark
    cdef double* scratch
    cdef cnp.int32_t* idx = <cnp.int32_t*>malloc(capnz * sizeof(cnp.int32_t))
    cdef double* val = <double*>malloc(capnz * sizeof(double))
    for kk in range(n3):
        if colmap[kk] + 1 > ncol:
            ncol = colmap[kk] + 1
    scratch = <double*>malloc((ncol + 1) * sizeof(double))
    touched = <Py_ssize_t*>malloc((ncol + 1) * sizeof(Py_ssize_t))
    mark = <Py_ssize_t*>malloc((ncol + 1) * sizeof(Py_ssize_t))
    for kk in range(ncol):
        scratch[kk] = 0.0
        mark[kk] = 0
    indptr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] ip = indptr
    with nogil:
        for r in range(m):
            ntouch = 0
            for kk in range(rowptr[r], rowptr[r + 1]):
                for i in range(3):
                    u[i] = (pts[kk, i] - origin[i]) * ih
                i0 = <Py_ssize_t>floor(u[0])
                i1 = <Py_ssize_t>floor(u[1])
                i2 = <Py_ssize_t>floor(u[2])
                if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= n - 1 or i1 >= n - 1 or i2 >= n - 1:
                    continue
                fr[0] = u[0] - i0
                fr[1] = u[1] - i1
                fr[2] = u[2] - i2
                for a in range(2):
                    wx = fr[0] if a else 1.0 - fr[0]
                    for b in range(2):
                        wy = fr[1] if b else 1.0 - fr[1]
                        for c in range(2):
                            wz = fr[2] if c else 1.0 - fr[2]
                            node = ((i0 + a) * n + (i1 + b)) * n + (i2 + c)
                            col = colmap[node]
                            if col < 0:
                                continue
                            if mark[col] != r + 1:
                                mark[col] = r + 1
                                touched[ntouch] = col
                                ntouch += 1
                            scratch[col] += qw[kk] * wx * wy * wz
            if nnz + ntouch > capnz:
                while nnz + ntouch > capnz:
                    capnz *= 2
                idx = <cnp.int32_t*>realloc(idx, capnz * sizeof(cnp.int32_t))
                val = <double*>realloc(val, capnz * sizeof(double))
            for kk in range(ntouch):
                col = touched[kk]
                idx[nnz] = <cnp.int32_t>col
                val[nnz] = scratch[col]
                scratch[col] = 0.0
                nnz += 1
            ip[r + 1] = nnz
    indices = np.empty(nnz, dtype=np.int32)
    data = np.empty(nnz)
    cdef cnp.int32_t[::1] iv = indices
    cdef double[::1] dv = data
    for kk in range(nnz):
        iv[kk] = idx[kk]
        dv[kk] = val[kk]
    free(idx)
    free(val)
    free(scratch)
    free(touched)
    free(mark)
    return indptr, indices, data
