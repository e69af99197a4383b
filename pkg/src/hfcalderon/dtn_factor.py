"""Semiclassical Dirichlet-to-Neumann factorization on a one-dimensional
periodic boundary collar.

Coordinates are ``x`` on ``[0, 2 pi)`` and the normal depth ``xn >= 0``; the
metric is ``g11(x, xn) dx^2 + dxn^2``.  The positive Laplacian factors as

    h^2 Delta_g = (hD_n + i h E - i A)(hD_n + i A) + smoothing,

with ``A`` of symbol ``a ~ sum_j h^j a_j`` solving
``a # a - h E a + h d_n a = q`` order by order, where ``#`` is the left
composition ``sum_k h^k / k! d_xi^k a D_x^k b``.  The heat parametrix
``U(t)`` with symbol ``u ~ sum_j h^j u_j`` solves ``h d_t u + a # u = 0``,
``u(0) = 1`` (the decaying branch).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import sympy

from .errors import DomainError, ResolutionError
from .kernelgrid import KernelGrid

X, XI, SGN = sympy.symbols("x xi s", real=True)
XN = sympy.Symbol("xn", nonnegative=True)


class EllipticityError(DomainError):
    """The principal symbol fails the ellipticity floor."""


def smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for ``t <= 0``, 1 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    def f(s):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    return f(t) / (f(t) + f(1.0 - t))


def low_frequency_cutoff(xi: np.ndarray) -> np.ndarray:
    """1 for ``|xi| <= 1/2``, 0 for ``|xi| >= 1``, smooth in between."""
    return 1.0 - smooth_step(2.0 * np.abs(xi) - 1.0)


def regularized_abs(xi: np.ndarray) -> np.ndarray:
    """``|xi|`` blended into ``<xi> = (1 + xi^2)^1/2`` inside ``|xi| < 1``."""
    chi = low_frequency_cutoff(xi)
    return chi * np.sqrt(1.0 + xi**2) + (1.0 - chi) * np.abs(xi)


@dataclass(frozen=True)
class CollarMetric:
    """Collar metric ``g11(x, xn) dx^2 + dxn^2`` with ``g11`` a sympy expression."""

    g11: sympy.Expr
    depth: float = 1.0
    name: str = "custom"

    @classmethod
    def flat(cls, depth: float = 1.0) -> "CollarMetric":
        return cls(sympy.Integer(1), depth, "flat")

    @classmethod
    def expanding(cls, modulation: float = 0.0, depth: float = 1.0) -> "CollarMetric":
        """``g11 = (1 + xn)^2 (1 + modulation cos x)``."""
        g = (1 + XN) ** 2 * (1 + sympy.nsimplify(modulation) * sympy.cos(X))
        return cls(g, depth, f"expanding({modulation})")

    @cached_property
    def g11_func(self):
        return sympy.lambdify((X, XN), self.g11, "numpy", cse=True)

    def sample(self, x, xn) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g11_func(x, xn), dtype=float), np.broadcast(x, xn).shape)

    def check(self, n: int = 64) -> dict:
        """Positivity and finite-difference derivative bounds on a sample grid."""
        x = np.linspace(0, 2 * np.pi, n, endpoint=False)
        xn = np.linspace(0, self.depth, n)
        G = self.sample(x[:, None], xn[None, :])
        if np.min(G) <= 0:
            raise DomainError("g11 is not positive on the collar")
        dn = np.diff(G, axis=1) / np.diff(xn)[None, :]
        return {"g11_min": float(G.min()), "g11_max": float(G.max()),
                "dn_g11_max": float(np.abs(dn).max())}


@dataclass(frozen=True)
class CollarSymbols:
    """First-order coefficient ``E`` and the symbol ``q = q0 + h q1`` of the tangential operator."""

    e: sympy.Expr
    q0: sympy.Expr
    q1: sympy.Expr

    def evaluate(self, name: str, x, xn, xi) -> np.ndarray:
        expr = getattr(self, name)
        fn = sympy.lambdify((X, XN, XI), expr, "numpy", cse=True)
        shape = np.broadcast(x, xn, xi).shape
        return np.broadcast_to(np.asarray(fn(x, xn, xi), dtype=complex), shape).copy()


def collar_symbols(cm: CollarMetric) -> CollarSymbols:
    """``E = -1/2 g^11 d_n g11`` and ``q = g^11 xi^2 - i h (1/2 g^11 d_x log g11 + d_x g^11) xi``."""
    g = cm.g11
    ginv = 1 / g
    e = -sympy.Rational(1, 2) * ginv * sympy.diff(g, XN)
    q0 = ginv * XI**2
    q1 = -sympy.I * (sympy.Rational(1, 2) * ginv * sympy.diff(sympy.log(g), X) + sympy.diff(ginv, X)) * XI
    return CollarSymbols(sympy.simplify(e), q0, sympy.simplify(q1))


def _compose(a_terms: list, b_terms: list, order: int) -> list:
    """Coefficients of ``h^j`` (``j <= order``) in ``a # b`` for ``a = sum h^l a_l``, ``b = sum h^m b_m``."""
    out = [sympy.Integer(0)] * (order + 1)
    for k in range(order + 1):
        for l, al in enumerate(a_terms):
            for m, bm in enumerate(b_terms):
                j = k + l + m
                if j > order:
                    continue
                dxi = sympy.diff(al, XI, k) if k else al
                dx = sympy.diff(bm, X, k) if k else bm
                out[j] += dxi * (-sympy.I) ** k * dx / math.factorial(k)
    return out


@dataclass
class FactorSymbols:
    """Symbols ``a_0..a_N`` of the factorization, as sympy expressions in
    ``x, xn, xi`` and the sign ``s`` of ``xi``."""

    metric: CollarMetric
    collar: CollarSymbols
    terms: list

    @property
    def order(self) -> int:
        return len(self.terms) - 1

    @cached_property
    def _funcs(self):
        return [sympy.lambdify((X, XN, XI, SGN), t, "numpy", cse=True) for t in self.terms]

    def evaluate(self, j: int, x, xn, xi, regularize: bool = True) -> np.ndarray:
        """``a_j`` on a grid.  With ``regularize`` the low frequencies are
        modified: ``|xi|`` in ``a_0`` becomes ``<xi>`` inside ``|xi| < 1`` and
        ``a_j`` (``j >= 1``) is cut off there."""
        x, xn, xi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, xn, xi)))
        if j == 0 and regularize:
            ginv = 1.0 / self.metric.sample(x, xn)
            return (np.sqrt(ginv) * regularized_abs(xi)).astype(complex)
        sg = np.where(xi >= 0, 1.0, -1.0)
        safe = np.where(xi == 0, 1.0, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.broadcast_to(np.asarray(self._funcs[j](x, xn, safe, sg), dtype=complex), x.shape).copy()
        if j == 0:
            val[xi == 0] = 0.0
            return val
        cut = low_frequency_cutoff(xi) if regularize else (xi == 0).astype(float)
        return np.where(cut >= 1.0, 0.0, val * (1.0 - cut))

    def total(self, x, xn, xi, h: float, regularize: bool = True) -> np.ndarray:
        return sum(h**j * self.evaluate(j, x, xn, xi, regularize) for j in range(self.order + 1))

    def residual(self, x, xn, xi, extra_terms: int = 2) -> np.ndarray:
        """Classical (``h = 1``) residual symbol ``a # a - E a + d_n a - q`` for ``xi > 0``."""
        a = [t.subs(SGN, 1) for t in self.terms]
        N = self.order
        comp = _compose(a, a, N + extra_terms)
        e, q0, q1 = self.collar.e, self.collar.q0, self.collar.q1
        # at h = 1 every order collapses into one symbol
        total = sum(comp) - e * sum(a) + sum(sympy.diff(t, XN) for t in a) - q0 - q1
        fn = sympy.lambdify((X, XN, XI), total, "numpy", cse=True)
        shape = np.broadcast(x, xn, xi).shape
        return np.broadcast_to(np.asarray(fn(x, xn, xi), dtype=complex), shape)


def factor_symbols(cm: CollarMetric, order: int) -> FactorSymbols:
    """Solve the factorization equations for ``a_0..a_order`` (``order <= 3``).

    ``a_0 = (g^11)^1/2 |xi|``; for ``j >= 1``,
    ``2 a_0 a_j = q_j - [h^j](a # a)' + E a_{j-1} - d_n a_{j-1}`` where the
    primed composition omits the two ``a_0 a_j`` products.
    """
    if not 0 <= order <= 3:
        raise DomainError("order must be between 0 and 3")
    try:
        cm.check()
    except DomainError as exc:
        raise EllipticityError("q0 = g^11 xi^2 is not positive on the collar") from exc
    cs = collar_symbols(cm)
    a0 = sympy.sqrt(1 / cm.g11) * SGN * XI
    terms = [a0]
    q = [cs.q0, cs.q1]
    for j in range(1, order + 1):
        comp = _compose(terms + [sympy.Integer(0)], terms + [sympy.Integer(0)], j)[j]
        rhs = (q[j] if j < len(q) else 0) - comp + cs.e * terms[j - 1] - sympy.diff(terms[j - 1], XN)
        terms.append(sympy.simplify((rhs / (2 * a0)).subs(SGN**2, 1)))
    return FactorSymbols(cm, cs, terms)


# ---------------------------------------------------------------------------
# heat parametrix


@dataclass
class SymbolTable:
    """Symbols sampled on ``(t, x, xi)`` grids.

    ``a[j]`` has shape ``(nt, nx, nxi)`` with ``t`` playing the role of the
    normal depth; ``u[j]`` is filled by :func:`heat_symbols`.
    """

    factors: FactorSymbols
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    regularize: bool = True
    a: np.ndarray = field(init=False, repr=False)
    e_sym: np.ndarray = field(init=False, repr=False)
    q_sym: np.ndarray = field(init=False, repr=False)
    u: np.ndarray | None = field(default=None, repr=False)
    h: float | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        T, Xg, K = np.meshgrid(self.t, self.x, self.xi, indexing="ij")
        self.a = np.stack([self.factors.evaluate(j, Xg, T, K, self.regularize)
                           for j in range(self.factors.order + 1)])
        cs = self.factors.collar
        self.e_sym = cs.evaluate("e", Xg, T, K).real
        if self.regularize:
            ginv = 1.0 / self.factors.metric.sample(Xg, T)
            self.q_sym = ginv * regularized_abs(K) ** 2 + 0j
        else:
            self.q_sym = cs.evaluate("q0", Xg, T, K)

    @property
    def gamma(self) -> float:
        """Ellipticity constant ``min Re a_0 / <xi>`` over the grid."""
        return float(np.min(self.a[0].real / np.sqrt(1.0 + self.xi**2)))

    def check_elliptic(self):
        re = self.a[0].real
        nz = self.xi != 0
        if np.any(re < 0) or np.any(re[..., nz] <= 0):
            raise EllipticityError("Re a_0 is not positive away from xi = 0")

    def save(self, prefix) -> list[Path]:
        prefix = Path(prefix)
        files = []
        arrays = {"a": self.a}
        if self.u is not None:
            arrays["u"] = self.u
        for name, arr in arrays.items():
            p = prefix.with_name(f"{prefix.name}_{name}.bin")
            inter = np.empty(arr.shape + (2,), dtype="<f8")
            inter[..., 0], inter[..., 1] = arr.real, arr.imag
            p.write_bytes(inter.tobytes())
            files.append(p)
        meta = prefix.with_name(prefix.name + ".json")
        meta.write_text(json.dumps({
            "grids": {"t": self.t.tolist(), "x": self.x.tolist(), "xi": self.xi.tolist()},
            "N": self.factors.order, "h": self.h, "regularize": self.regularize,
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
            "dtype": "complex as interleaved little-endian float64",
            "gamma": self.gamma, "metric": self.factors.metric.name}, indent=1))
        return files + [meta]


def symbol_table(cm: CollarMetric, order: int, t, x, xi, regularize: bool = True) -> SymbolTable:
    return SymbolTable(factor_symbols(cm, order), t, x, xi, regularize)


def _dx(values: np.ndarray, k: int) -> np.ndarray:
    """``D_x^k = (-i d_x)^k`` spectrally along axis -2 (periodic ``x``)."""
    if k == 0:
        return values
    n = values.shape[-2]
    freq = np.fft.fftfreq(n, 1.0 / n)
    mult = (freq ** k)[:, None]
    return np.fft.ifft(np.fft.fft(values, axis=-2) * mult, axis=-2)


def _xi_derivative_tables(st: SymbolTable, kmax: int) -> list:
    """``d_xi^k a_l`` on the table grid, from the exact symbols (cut off as in the table)."""
    fac = st.factors
    T, Xg, K = np.meshgrid(st.t, st.x, st.xi, indexing="ij")
    out = []
    for k in range(kmax + 1):
        row = []
        for l, term in enumerate(fac.terms):
            if k == 0:
                row.append(st.a[l])
                continue
            if l == 0 and st.regularize:
                # finite differences of the regularized principal symbol
                step = 1e-3
                vals = [fac.evaluate(0, Xg, T, K + m * step, True) for m in (-2, -1, 0, 1, 2)]
                row.append(_fd_derivative(vals, step, k))
                continue
            expr = sympy.diff(term, XI, k)
            fn = sympy.lambdify((X, XN, XI, SGN), expr, "numpy", cse=True)
            sg = np.where(K >= 0, 1.0, -1.0)
            safe = np.where(K == 0, 1.0, K)
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.broadcast_to(np.asarray(fn(Xg, T, safe, sg), dtype=complex), K.shape).copy()
            cut = low_frequency_cutoff(K) if st.regularize else (K == 0).astype(float)
            row.append(np.where(cut >= 1.0, 0.0, v * (1.0 - cut)))
        out.append(row)
    return out


def _fd_derivative(vals, step, k):
    fm2, fm1, f0, f1, f2 = vals
    if k == 1:
        return (fm2 - 8 * fm1 + 8 * f1 - f2) / (12 * step)
    if k == 2:
        return (-fm2 + 16 * fm1 - 30 * f0 + 16 * f1 - f2) / (12 * step**2)
    if k == 3:
        return (-fm2 + 2 * fm1 - 2 * f1 + f2) / (2 * step**3)
    raise DomainError("xi derivatives above third order are not tabulated")


def heat_symbols(st: SymbolTable, h: float, order: int | None = None) -> SymbolTable:
    """Fill ``st.u`` with ``u_0..u_order`` on the table's ``t`` grid.

    ``u_0 = exp(-int_0^t a_0 / h)`` (trapezoid in ``t``, exact for
    ``t``-independent ``a_0``); ``u_j = -h^-1 int_0^t exp(-int_s^t a_0 / h) e_j(s) ds``
    with ``e_j = sum_{k + l + m = j, m < j} d_xi^k a_l D_x^k u_m / k!``,
    integrated by an exponential trapezoid rule.
    """
    st.check_elliptic()
    if st.t[0] != 0.0 or np.any(np.diff(st.t) <= 0):
        raise DomainError("t grid must start at 0 and increase")
    N = st.factors.order if order is None else int(order)
    if N > st.factors.order:
        raise DomainError("heat order exceeds the factorization order")
    a0 = st.a[0]
    dt = np.diff(st.t)
    phase = np.zeros_like(a0)
    phase[1:] = np.cumsum(0.5 * (a0[1:] + a0[:-1]) * dt[:, None, None], axis=0)
    u = np.zeros((N + 1,) + a0.shape, dtype=complex)
    u[0] = np.exp(-phase / h)
    dtabs = _xi_derivative_tables(st, N) if N else []
    for j in range(1, N + 1):
        e = np.zeros_like(a0)
        for k in range(j + 1):
            for l in range(j - k + 1):
                m = j - k - l
                if m >= j or l > st.factors.order:
                    continue
                e += dtabs[k][l] * _dx(u[m], k) / math.factorial(k)
        u[j] = _exp_trapezoid(a0, e, st.t, h)
    st.u = u
    st.h = h
    return st


def _exp_trapezoid(a0, e, t, h):
    """Solve ``h u' + a0 u + e = 0``, ``u(0) = 0`` by exponential time differencing
    with ``e`` linear on each step."""
    out = np.zeros_like(e)
    for n in range(len(t) - 1):
        dt = t[n + 1] - t[n]
        lam = 0.5 * (a0[n] + a0[n + 1]) / h
        z = lam * dt
        small = np.abs(z) < 1e-4
        zs = np.where(small, 1.0, z)
        phi1 = np.where(small, 1 - z / 2 + z**2 / 6, -np.expm1(-zs) / zs)
        phi2 = np.where(small, 0.5 - z / 6 + z**2 / 24, (zs - 1 + np.exp(-zs)) / zs**2)
        out[n + 1] = (np.exp(-z) * out[n]
                      - dt / h * ((phi1 - phi2) * e[n] + phi2 * e[n + 1]))
    return out


def residue_u0(a0, t: float, h: float, rho, n_nodes: int = 64, radius: float = 0.5) -> np.ndarray:
    """``(2 pi i)^-1 contour-integral exp(-rho z t / h) / (z - a0 / rho) dz`` by the
    trapezoid rule on a circle around the pole; equals ``exp(-a0 t / h)``."""
    a0 = np.asarray(a0, dtype=complex)
    rho = np.asarray(rho, dtype=float)
    pole = a0 / rho
    theta = 2 * np.pi * np.arange(n_nodes) / n_nodes
    zeta = radius * np.exp(1j * theta)
    z = pole[..., None] + zeta
    # dz = i zeta dtheta, so (2 pi i)^-1 * i zeta * 2 pi / n * f / zeta
    vals = np.exp(-rho[..., None] * z * t / h)
    return vals.mean(axis=-1)


def heat_apply(st: SymbolTable, f: np.ndarray, t: float, h: float, order: int = 0) -> np.ndarray:
    """Apply ``sum_j h^j Op(u_j(t))`` to a periodic grid function by FFT quantization.

    Symbols are evaluated at ``xi = h k`` for the integer frequencies of the
    grid; ``t`` must lie on the table's time grid.
    """
    f = np.asarray(f)
    n = f.shape[-1]
    k = np.fft.fftfreq(n, 1.0 / n)
    x = 2 * np.pi * np.arange(n) / n
    it = np.flatnonzero(np.isclose(st.t, t))
    if it.size == 0:
        raise DomainError(f"t = {t} is not on the table's time grid")
    if t == 0:
        return f.astype(complex)
    sub = SymbolTable(st.factors, st.t[: it[0] + 1], x, h * k, st.regularize)
    heat_symbols(sub, h, order)
    sym = sum(h**j * sub.u[j][-1] for j in range(order + 1))  # (nx, nk)
    _check_x_resolution(sym)
    fhat = np.fft.fft(f) / n
    return (sym * np.exp(1j * np.outer(x, k))) @ fhat


# ---------------------------------------------------------------------------
# DtN kernel


def _check_x_resolution(sym: np.ndarray, tol: float = 1e-8):
    """Raise when the symbol's ``x`` variation reaches the grid Nyquist."""
    n = sym.shape[0]
    if n < 4:
        return
    spec = np.abs(np.fft.fft(sym, axis=0))
    peak = spec.max()
    if peak == 0:
        return
    nyq = spec[n // 2 - 1: n // 2 + 2].max()
    if nyq > tol * peak:
        raise ResolutionError(f"symbol not resolved in x at {n} points: Nyquist content "
                              f"{nyq / peak:.2e} of peak; refine the boundary grid")


def frequency_window(k: np.ndarray, n: int, start: float = 0.1) -> np.ndarray:
    """Smooth roll-off from 1 at ``|k| = start * n`` to 0 at the Nyquist ``n / 2``."""
    s = (np.abs(k) - start * n) / ((0.5 - start) * n)
    return 1.0 - smooth_step(s)


def dtn_kernel(fs: FactorSymbols, h: float, n: int, band: float = 0.1,
               window: float | None = 0.1, regularize: bool = False, order: int | None = None,
               symbol=None) -> KernelGrid:
    """Kernel ``h^-1 (2 pi)^-1 sum_k exp(i k (x - y)) a(x, h k)`` on ``n`` periodic points.

    Applying it to samples uses the weights ``2 pi / n``.  ``window`` rolls the
    symbol off smoothly toward the Nyquist frequency (``None`` truncates).
    ``symbol(x, xi)`` overrides the factorization symbol.  Entries with
    periodic distance below ``band`` are NaN.
    """
    x = 2 * np.pi * np.arange(n) / n
    k = np.fft.fftfreq(n, 1.0 / n)
    if symbol is not None:
        sym = np.asarray(symbol(x[:, None], h * k[None, :]), dtype=complex)
        sym = np.broadcast_to(sym, (n, n))
    else:
        N = fs.order if order is None else order
        sym = sum(h**j * fs.evaluate(j, x[:, None], 0.0, h * k[None, :], regularize)
                  for j in range(N + 1))
    _check_x_resolution(sym)
    if window is not None:
        sym = sym * frequency_window(k, n, window)[None, :]
    # K[i, m] = sum_k exp(i k (x_i - x_m)) sym[i, k] / (2 pi h)
    K = (sym * np.exp(1j * np.outer(x, k))) @ np.exp(-1j * np.outer(k, x)) / (2 * np.pi * h)
    d = np.abs(x[:, None] - x[None, :])
    d = np.minimum(d, 2 * np.pi - d)
    K = np.where(d < band, np.nan, K)
    return KernelGrid(K, x, x, {"h": h, "band": band, "window": window, "n": n,
                                "normalization": "1/(2 pi h)"})


def smoothing_exponent(hs, t: float, power: int, xi_max: float = 50.0, n_xi: int = 20001) -> float:
    """Fitted exponent ``p`` in ``sup_xi |xi|^power |u_0(t, xi)| ~ h^p`` for the
    flat collar, with ``u_0`` from :func:`heat_symbols` on the unregularized symbol."""
    fs = factor_symbols(CollarMetric.flat(), 0)
    xi = np.linspace(0.0, xi_max, n_xi)
    sups = []
    for h in hs:
        st = heat_symbols(SymbolTable(fs, [0.0, t], [0.0], xi, regularize=False), h)
        sups.append(np.max(xi**power * np.abs(st.u[0][-1, 0])))
    return float(np.polyfit(np.log(hs), np.log(sups), 1)[0])
