"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Signatures and outputs match the compiled module so either can back
:mod:`hfcalderon._backend`.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

KIND_CONST, KIND_SPLINE, KIND_EXPQUAD, KIND_HYPERBOLIC, KIND_BUMP = range(5)


def _mirror(i, n):
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.abs(i) % period
    return np.where(i >= n, period - i, i)


def _basis(t, p):
    """Uniform B-spline basis of degree p for local parameters t, with derivatives.

    Returns three arrays of shape (len(t), p + 1).
    """
    t = np.asarray(t, dtype=float)
    table = [np.ones((t.size, 1))]
    for j in range(1, p + 1):
        prev = table[-1]
        cur = np.zeros((t.size, j + 1))
        saved = np.zeros(t.size)
        for r in range(j):
            temp = prev[:, r] / j
            cur[:, r] = saved + (r + 1 - t) * temp
            saved = (t + j - r - 1.0) * temp
        cur[:, j] = saved
        table.append(cur)
    b0 = table[p]
    b1 = np.zeros_like(b0)
    b2 = np.zeros_like(b0)
    if p >= 1:
        lo = table[p - 1]
        b1[:, 1:] += lo
        b1[:, :-1] -= lo
    if p >= 2:
        lo = table[p - 2]
        b2[:, 2:] += lo
        b2[:, 1:-1] -= 2.0 * lo
        b2[:, :-2] += lo
    return b0, b1, b2


def bspline_eval(coef, origin, spacing, order, pts, nderiv, chunk=20000):
    pts = np.ascontiguousarray(pts, dtype=float)
    out = np.zeros((pts.shape[0], 10))
    for start in range(0, pts.shape[0], chunk):
        out[start:start + chunk] = _bspline_chunk(coef, origin, spacing, order,
                                                  pts[start:start + chunk], nderiv)
    return out


def _bspline_chunk(coef, origin, spacing, order, pts, nderiv):
    p = order
    half = (p - 1) // 2
    u = (pts - np.asarray(origin)[None, :]) / spacing
    m = np.floor(u)
    bases = [_basis(u[:, a] - m[:, a], p) for a in range(3)]
    idx = [_mirror(m[:, a].astype(np.int64)[:, None] - half + np.arange(p + 1)[None, :],
                   coef.shape[a]) for a in range(3)]
    c = coef[idx[0][:, :, None, None], idx[1][:, None, :, None], idx[2][:, None, None, :]]
    out = np.zeros((pts.shape[0], 10))
    bx, by, bz = bases

    def contract(dx, dy, dz):
        return np.einsum("mijk,mi,mj,mk->m", c, bx[dx], by[dy], bz[dz], optimize=True)

    out[:, 0] = contract(0, 0, 0)
    if nderiv >= 1:
        out[:, 1] = contract(1, 0, 0) / spacing
        out[:, 2] = contract(0, 1, 0) / spacing
        out[:, 3] = contract(0, 0, 1) / spacing
    if nderiv >= 2:
        h2 = spacing * spacing
        out[:, 4] = contract(2, 0, 0) / h2
        out[:, 5] = contract(1, 1, 0) / h2
        out[:, 6] = contract(1, 0, 1) / h2
        out[:, 7] = contract(0, 2, 0) / h2
        out[:, 8] = contract(0, 1, 1) / h2
        out[:, 9] = contract(0, 0, 2) / h2
    return out


def phi_eval(kind, prm, coef, origin, spacing, order, pts, nderiv):
    pts = np.asarray(pts, dtype=float)
    out = np.zeros((pts.shape[0], 10))
    if kind == KIND_SPLINE:
        return bspline_eval(coef, origin, spacing, order, pts, nderiv)
    if kind == KIND_CONST:
        out[:, 0] = prm[0]
        return out
    hess_index = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    if kind == KIND_EXPQUAD:
        a = prm[0]
        d = pts - np.asarray(prm[1:4])[None, :]
        out[:, 0] = a * np.sum(d * d, axis=1)
        out[:, 1:4] = 2.0 * a * d
        out[:, 4] = out[:, 7] = out[:, 9] = 2.0 * a
        return out
    if kind == KIND_HYPERBOLIC:
        k, a = prm[0], prm[1]
        d = pts - np.asarray(prm[2:5])[None, :]
        den = a * a - np.sum(d * d, axis=1)
        out[:, 0] = np.log(2.0 * a / k) - np.log(den)
        out[:, 1:4] = 2.0 * d / den[:, None]
        for col, (i, j) in enumerate(hess_index):
            out[:, 4 + col] = 4.0 * d[:, i] * d[:, j] / den**2 + (2.0 / den if i == j else 0.0)
        return out
    if kind == KIND_BUMP:
        amp, ell = prm[0], prm[1]
        d = pts - np.asarray(prm[2:5])[None, :]
        e = amp * np.exp(-np.sum(d * d, axis=1) / ell**2)
        c = 1.0 + e
        gc = -2.0 * e[:, None] * d / ell**2
        out[:, 0] = np.log(c)
        out[:, 1:4] = gc / c[:, None]
        for col, (i, j) in enumerate(hess_index):
            hc = e * (4.0 * d[:, i] * d[:, j] / ell**4 - (2.0 / ell**2 if i == j else 0.0))
            out[:, 4 + col] = hc / c - gc[:, i] * gc[:, j] / c**2
        return out
    raise ValueError(f"unknown metric kind {kind}")


def _geo_rhs(kind, prm, spl, y, jac):
    f = phi_eval(kind, prm, *spl, y[:, 0:3], 2 if jac else 1)
    g = f[:, 1:4]
    u = y[:, 3:6]
    gu = np.sum(g * u, axis=1)
    uu = np.sum(u * u, axis=1)
    dy = np.zeros_like(y)
    dy[:, 0:3] = u
    dy[:, 3:6] = -2.0 * gu[:, None] * u + uu[:, None] * g
    if not jac:
        return dy
    H = np.empty((y.shape[0], 3, 3))
    H[:, 0, 0], H[:, 0, 1], H[:, 0, 2] = f[:, 4], f[:, 5], f[:, 6]
    H[:, 1, 0], H[:, 1, 1], H[:, 1, 2] = f[:, 5], f[:, 7], f[:, 8]
    H[:, 2, 0], H[:, 2, 1], H[:, 2, 2] = f[:, 6], f[:, 8], f[:, 9]
    Hu = np.einsum("mkj,mk->mj", H, u)
    Ax = -2.0 * u[:, :, None] * Hu[:, None, :] + uu[:, None, None] * H
    Au = -2.0 * u[:, :, None] * g[:, None, :] + 2.0 * g[:, :, None] * u[:, None, :]
    Au -= 2.0 * gu[:, None, None] * np.eye(3)[None]
    Y = y[:, 6:15].reshape(-1, 3, 3)
    V = y[:, 15:24].reshape(-1, 3, 3)
    dy[:, 6:15] = V.reshape(-1, 9)
    dy[:, 15:24] = (Ax @ Y + Au @ V).reshape(-1, 9)
    return dy


def exp_map(kind, prm, coef, origin, spacing, order, P, Wv, nsteps, jac, X, U, DX, DU,
            path, path_jac):
    spl = (coef, origin, spacing, order)
    m = P.shape[0]
    n = 24 if jac else 6
    c0 = np.exp(phi_eval(kind, prm, *spl, P, 0)[:, 0])
    y = np.zeros((m, n))
    y[:, 0:3] = P
    y[:, 3:6] = Wv / c0[:, None]
    if jac:
        y[:, 15] = y[:, 19] = y[:, 23] = 1.0 / c0
    rec = path.shape[0] > 0
    recj = path_jac.shape[0] > 0
    if rec:
        path[:, 0, :] = y[:, 0:6]
    if recj:
        path_jac[:, 0, :] = y[:, 6:15]
    dt = 1.0 / nsteps
    for step in range(nsteps):
        k1 = _geo_rhs(kind, prm, spl, y, jac)
        k2 = _geo_rhs(kind, prm, spl, y + 0.5 * dt * k1, jac)
        k3 = _geo_rhs(kind, prm, spl, y + 0.5 * dt * k2, jac)
        k4 = _geo_rhs(kind, prm, spl, y + dt * k3, jac)
        y = y + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        if rec:
            path[:, step + 1, :] = y[:, 0:6]
        if recj:
            path_jac[:, step + 1, :] = y[:, 6:15]
    X[...] = y[:, 0:3]
    U[...] = y[:, 3:6]
    if jac:
        DX[...] = y[:, 6:15].reshape(-1, 3, 3)
        DU[...] = y[:, 15:24].reshape(-1, 3, 3)


def born_moments(coef, origin, spacing, order, wcenter, wradius, c0, e1, e2, e3, a, tau,
                 xg, xw, nphi, nu1, nu2, M, Mp1, Mq1, Mp2, Mq2):
    phi = 2.0 * np.pi * np.arange(nphi) / nphi
    cph, sph = np.cos(phi), np.sin(phi)
    dphi = 2.0 * np.pi / nphi
    for ic in range(c0.shape[0]):
        aa = a[ic]
        t = tau[ic][:, None, None]
        x = xg[None, :, None]
        st = np.sqrt(np.clip(t * t - 1.0, 0.0, None))
        rad = aa * st * np.sqrt(1.0 - x * x)
        y = (c0[ic] + rad[..., None] * (cph[None, None, :, None] * e1[ic] + sph[None, None, :, None] * e2[ic])
             + (aa * t * x)[..., None] * e3[ic])
        y = np.broadcast_to(y, (tau.shape[1], xg.size, nphi, 3))
        inside = np.sum((y - wcenter) ** 2, axis=-1) < wradius**2
        wv = np.zeros(inside.shape)
        if inside.any():
            wv[inside] = bspline_eval(coef, origin, spacing, order, y[inside], 0)[:, 0]
        wv *= (xw[None, :, None] * dphi)
        r1 = np.broadcast_to(aa * (t + x), inside.shape)
        r2 = np.broadcast_to(aa * (t - x), inside.shape)
        z1 = c0[ic] - aa * e3[ic]
        z2 = c0[ic] + aa * e3[ic]
        p1 = np.einsum("...d,d->...", z1 - y, nu1[ic]) / r1
        p2 = np.einsum("...d,d->...", z2 - y, nu2[ic]) / r2
        M[ic] = wv.sum(axis=(1, 2))
        Mp1[ic] = (wv * p1).sum(axis=(1, 2))
        Mq1[ic] = (wv * p1 / r1).sum(axis=(1, 2))
        Mp2[ic] = (wv * p2).sum(axis=(1, 2))
        Mq2[ic] = (wv * p2 / r2).sum(axis=(1, 2))


def _clip_ball(A, B, c, rad):
    d = B - A
    f = A - c
    aa = d @ d
    bb = 2.0 * d @ f
    cc = f @ f - rad * rad
    disc = bb * bb - 4.0 * aa * cc
    if aa <= 0.0 or disc <= 0.0:
        return None
    sq = np.sqrt(disc)
    t0 = max((-bb - sq) / (2.0 * aa), 0.0)
    t1 = min((-bb + sq) / (2.0 * aa), 1.0)
    return (t0, t1) if t1 > t0 else None


def _pieces(ua, ub, t0, t1):
    cuts = [np.array([t0, t1])]
    for ax in range(3):
        du = ub[ax] - ua[ax]
        if abs(du) < 1e-300:
            continue
        lo, hi = sorted((ua[ax] + t0 * du, ua[ax] + t1 * du))
        k = np.arange(np.floor(lo) + 1.0, hi)
        t = (k - ua[ax]) / du
        cuts.append(t[(t > t0) & (t < t1)])
    return np.sort(np.concatenate(cuts))


def line_integrals_spline(coef, origin, spacing, order, center, radius, A, B, gx, gw):
    origin = np.asarray(origin)
    nodes, wts, rows = [], [], []
    for r in range(A.shape[0]):
        span = _clip_ball(A[r], B[r], center, radius)
        if span is None:
            continue
        ua = (A[r] - origin) / spacing
        ub = (B[r] - origin) / spacing
        cuts = _pieces(ua, ub, *span)
        ta, tb = cuts[:-1], cuts[1:]
        keep = tb > ta
        ta, tb = ta[keep], tb[keep]
        tt = (0.5 * (ta + tb))[:, None] + (0.5 * (tb - ta))[:, None] * gx[None, :]
        L = np.linalg.norm(B[r] - A[r])
        nodes.append(A[r] + tt.reshape(-1, 1) * (B[r] - A[r]))
        wts.append(((0.5 * (tb - ta))[:, None] * gw[None, :]).ravel() * L)
        rows.append(np.full(tt.size, r))
    out = np.zeros(A.shape[0])
    if nodes:
        vals = bspline_eval(coef, origin, spacing, order, np.concatenate(nodes), 0)[:, 0]
        np.add.at(out, np.concatenate(rows), vals * np.concatenate(wts))
    return out


def _trilinear_rows(pts, qw, rows, origin, spacing, n, colmap):
    u = (pts - np.asarray(origin)[None, :]) / spacing
    i = np.floor(u).astype(np.int64)
    ok = np.all((i >= 0) & (i < n - 1), axis=1)
    u, i, qw, rows = u[ok], i[ok], qw[ok], rows[ok]
    fr = u - i
    R, C, D = [], [], []
    for a in (0, 1):
        wx = fr[:, 0] if a else 1.0 - fr[:, 0]
        for b in (0, 1):
            wy = fr[:, 1] if b else 1.0 - fr[:, 1]
            for c in (0, 1):
                wz = fr[:, 2] if c else 1.0 - fr[:, 2]
                node = ((i[:, 0] + a) * n + (i[:, 1] + b)) * n + (i[:, 2] + c)
                col = colmap[node]
                keep = col >= 0
                R.append(rows[keep])
                C.append(col[keep])
                D.append((qw * wx * wy * wz)[keep])
    return np.concatenate(R), np.concatenate(C), np.concatenate(D)


def _to_csr(R, C, D, m, ncol):
    mat = sp.csr_matrix((D, (R, C)), shape=(m, ncol))
    mat.sum_duplicates()
    return (mat.indptr.astype(np.int64), mat.indices.astype(np.int32), mat.data)


def ray_matrix_chords(A, B, weight, origin, spacing, n, colmap, center, radius):
    origin = np.asarray(origin)
    gx = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    nodes, wts, rows = [], [], []
    for r in range(A.shape[0]):
        if weight[r] == 0.0:
            continue
        span = _clip_ball(A[r], B[r], center, radius)
        if span is None:
            continue
        ua = (A[r] - origin) / spacing
        ub = (B[r] - origin) / spacing
        cuts = _pieces(ua, ub, *span)
        ta, tb = cuts[:-1], cuts[1:]
        keep = tb > ta
        ta, tb = ta[keep], tb[keep]
        hl = 0.5 * (tb - ta)
        tt = (0.5 * (ta + tb))[:, None] + hl[:, None] * gx[None, :]
        L = np.linalg.norm(B[r] - A[r])
        nodes.append(A[r] + tt.reshape(-1, 1) * (B[r] - A[r]))
        wts.append(np.repeat(hl * L * weight[r], 2))
        rows.append(np.full(tt.size, r))
    ncol = int(colmap.max()) + 1
    if not nodes:
        return _to_csr(np.zeros(0, int), np.zeros(0, int), np.zeros(0), A.shape[0], ncol)
    R, C, D = _trilinear_rows(np.concatenate(nodes), np.concatenate(wts),
                              np.concatenate(rows), origin, spacing, n, colmap)
    return _to_csr(R, C, D, A.shape[0], ncol)


def ray_matrix_nodes(pts, qw, rowptr, origin, spacing, n, colmap):
    m = rowptr.size - 1
    rows = np.repeat(np.arange(m), np.diff(rowptr))
    R, C, D = _trilinear_rows(np.asarray(pts), np.asarray(qw), rows, origin, spacing, n, colmap)
    return _to_csr(R, C, D, m, int(colmap.max()) + 1)
