"""Boundary data synthesis: Born kernels, their stationary-phase reduction to a
weighted ray transform, and the boundary Green pairing.

Sign convention: the first Born term is ``F1 = h^2 G0 W G0`` and the second is
``F2 = -h^4 G0 W G0 W G0`` (expansion of ``R - R~`` for ``W = V~ - V``).
The stationary-phase leading term is

    F_sp(z, z'') = C h^-1 sigma^-1 exp(-i sigma r / h) X^w W(z, z''),  C = -i / (8 pi),

with ray weight ``(s (r - s) sqrt(J1 J2 det Hess))^-1`` (equal to ``1/r`` in
flat space); its boundary-normal derivative at leading order is
``-1/(8 pi) h^-2 d_nu r exp(-i sigma r / h) X^w W``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy

from . import _backend
from .boundary import BoundaryMesh
from .errors import DomainError, MemoryBudgetError, ResolutionError
from .geometry import MetricSpec, exp_map, phase_hessian_batch, solve_exp
from .hadamard import SemiclassicalParams
from .kernelgrid import KernelGrid
from .potential import PotentialField
from .xray import ConeGrid, WeightField, forward

STATIONARY_CONSTANT = -1j / (8.0 * np.pi)
NORMAL_CONSTANT = -1.0 / (8.0 * np.pi)


@dataclass
class BornKernel:
    """Kernel values and outward normal derivatives (in the first variable)."""

    value: KernelGrid
    dnu: KernelGrid
    meta: dict = field(default_factory=dict)

    def pair_values(self, cone: ConeGrid) -> tuple[np.ndarray, np.ndarray]:
        i, j = cone.pairs[:, 0], cone.pairs[:, 1]
        return self.value.values[i, j], self.dnu.values[i, j]

    def save(self, prefix) -> list[Path]:
        prefix = Path(prefix)
        files = self.value.save(prefix.with_name(prefix.name + "_value"))
        files += self.dnu.save(prefix.with_name(prefix.name + "_dnu"))
        meta_path = prefix.with_name(prefix.name + "_meta.json")
        meta_path.write_text(json.dumps(_plain(self.meta), indent=1, sort_keys=True))
        return files + [meta_path]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _kernel_from_pairs(cone: ConeGrid, vals: np.ndarray, meta: dict) -> KernelGrid:
    n = cone.mesh.size
    out = np.full((n, n), np.nan + 0j)
    out[cone.pairs[:, 0], cone.pairs[:, 1]] = vals
    kg = KernelGrid(out, cone.nodes, cone.nodes, dict(meta))
    kg.meta["boundary"] = cone.mesh.describe()
    kg.meta["band"] = cone.band
    return kg


# ---------------------------------------------------------------------------
# quadrature settings


@dataclass(frozen=True)
class BornQuadrature:
    """Settings for the Born integrals.

    Flat metrics use confocal prolate spheroidal coordinates around each chord:
    angular moments of ``W`` are sampled at ``n_cheb`` Chebyshev-Lobatto values
    of the spheroid parameter (``n_x`` Gauss nodes in ``cos nu``, ``n_phi``
    trapezoid nodes in azimuth) and integrated against the phase on panels of
    path length ``h / |sigma|`` with ``panel_nodes`` Gauss nodes each.
    Cartesian quadratures (curved order 1, all order 2) use a grid spacing of
    at most ``h / (points_per_wavelength |sigma| c_max)``.
    """

    n_cheb: int = 32
    n_x: int = 24
    n_phi: int = 32
    panel_nodes: int = 8
    points_per_wavelength: float = 6.0
    coarse_spacing: float = 0.1
    memory_budget: float = 1.5e9
    chunk: int = 2000

    def check(self):
        if self.panel_nodes < self.points_per_wavelength:
            raise ResolutionError(
                f"{self.panel_nodes} nodes per panel of length h/|sigma| is below the "
                f"required {self.points_per_wavelength} points per h/|sigma|")


def _frame(e3: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(e3[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(e3, helper)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    return e1, np.cross(e3, e1)


def _barycentric_matrix(n: int, u: np.ndarray) -> np.ndarray:
    """Interpolation matrix from Chebyshev-Lobatto nodes on [-1, 1] to points ``u``."""
    nodes = -np.cos(np.pi * np.arange(n) / (n - 1))
    wb = (-1.0) ** np.arange(n)
    wb[0] *= 0.5
    wb[-1] *= 0.5
    D = u[:, None] - nodes[None, :]
    hit = np.abs(D) < 1e-14
    D[hit] = 1.0
    C = wb[None, :] / D
    B = C / C.sum(axis=1, keepdims=True)
    rows = np.flatnonzero(hit.any(axis=1))
    for r in rows:
        B[r] = hit[r].astype(float)
    return B


class SpheroidalMoments:
    """h-independent angular moments of ``W`` for chords from ``A`` to ``B``.

    ``nu_a`` and ``nu_b`` are the Euclidean unit normals used for the normal
    derivatives at either end.
    """

    def __init__(self, spec: MetricSpec, A, B, nu_a, nu_b, W: PotentialField,
                 quad: BornQuadrature = BornQuadrature()):
        if not spec.is_flat:
            raise DomainError("spheroidal Born quadrature requires a flat metric")
        self.spec, self.W, self.quad = spec, W, quad
        self.scale = spec.c if spec.kind == "constant-conformal" else 1.0
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        nc = A.shape[0]
        self.n_chords = nc
        d = np.linalg.norm(B - A, axis=1)
        self.d = d
        self.zero = W.is_zero or nc == 0
        if self.zero:
            return
        cs, rho = W.center_array, W.support_radius
        la, lb = np.linalg.norm(A - cs, axis=1), np.linalg.norm(B - cs, axis=1)
        self.tau_lo = np.maximum(1.0, (la + lb - 2 * rho) / d)
        self.tau_hi = (la + lb + 2 * rho) / d
        n = quad.n_cheb
        u = -np.cos(np.pi * np.arange(n) / (n - 1))
        tau = self.tau_lo[:, None] + 0.5 * (self.tau_hi - self.tau_lo)[:, None] * (u[None, :] + 1.0)
        c0 = 0.5 * (A + B)
        e3 = (B - A) / d[:, None]
        e1, e2 = _frame(e3)
        nu1 = np.atleast_2d(np.asarray(nu_a, dtype=float))
        nu2 = np.atleast_2d(np.asarray(nu_b, dtype=float))
        xg, xw = np.polynomial.legendre.leggauss(quad.n_x)
        self.M = np.zeros((nc, n)); self.Mp1 = np.zeros((nc, n)); self.Mq1 = np.zeros((nc, n))
        self.Mp2 = np.zeros((nc, n)); self.Mq2 = np.zeros((nc, n))
        g = W.grid
        for s in range(0, nc, quad.chunk):
            sl = slice(s, min(s + quad.chunk, nc))
            outs = [np.zeros((sl.stop - sl.start, n)) for _ in range(5)]
            _backend.kernels.born_moments(
                g.coef, g.origin, g.spacing, g.order, W.center_array, rho,
                np.ascontiguousarray(c0[sl]), np.ascontiguousarray(e1[sl]),
                np.ascontiguousarray(e2[sl]), np.ascontiguousarray(e3[sl]),
                np.ascontiguousarray(0.5 * d[sl]), np.ascontiguousarray(tau[sl]), xg, xw,
                quad.n_phi, np.ascontiguousarray(nu1[sl]), np.ascontiguousarray(nu2[sl]), *outs)
            for arr, o in zip((self.M, self.Mp1, self.Mq1, self.Mp2, self.Mq2), outs):
                arr[sl] = o

    @classmethod
    def for_cone(cls, spec: MetricSpec, cone: ConeGrid, W: PotentialField,
                 quad: BornQuadrature = BornQuadrature()) -> "SpheroidalMoments":
        Z, nrm, ch = cone.nodes, cone.mesh.normals, cone.chords
        return cls(spec, Z[ch[:, 0]], Z[ch[:, 1]], nrm[ch[:, 0]], nrm[ch[:, 1]], W, quad)

    def chord_values(self, params: SemiclassicalParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``F``, ``d_nu F`` at ``A`` and ``d_nu F`` at ``B``, per chord."""
        nc = self.n_chords
        if self.zero:
            z = np.zeros(nc, dtype=complex)
            return z, z.copy(), z.copy()
        self.quad.check()
        h, sigma, c = params.h, params.sigma, self.scale
        k = sigma * c / h
        F = np.zeros(nc, dtype=complex); D1 = np.zeros(nc, dtype=complex); D2 = np.zeros(nc, dtype=complex)
        g, gw = np.polynomial.legendre.leggauss(self.quad.panel_nodes)
        span = self.d * (self.tau_hi - self.tau_lo)
        panels = np.maximum(1, np.ceil(abs(sigma) * c * span / h).astype(int))
        order = np.argsort(panels)
        step = max(1, self.quad.chunk // 4)
        for s in range(0, nc, step):
            idx = order[s:s + step]
            npan = int(panels[idx].max())
            edges = np.linspace(-1.0, 1.0, npan + 1)
            mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * (edges[1:] - edges[:-1])
            u = (mid[:, None] + half[:, None] * g[None, :]).ravel()
            wu = (half[:, None] * gw[None, :]).ravel()
            Bm = _barycentric_matrix(self.quad.n_cheb, u)
            dtau = 0.5 * (self.tau_hi[idx] - self.tau_lo[idx])
            tau = self.tau_lo[idx][:, None] + dtau[:, None] * (u[None, :] + 1.0)
            a = 0.5 * self.d[idx]
            ph = np.exp(-1j * k * self.d[idx][:, None] * tau) * (wu[None, :] * dtau[:, None])
            # the conformal factor multiplies the value once; the g-normal derivative cancels it
            pref = a / (16.0 * np.pi**2 * h**2)
            F[idx] = c * pref * np.sum(ph * (self.M[idx] @ Bm.T), axis=1)
            D1[idx] = pref * np.sum(ph * (-1j * k * (self.Mp1[idx] @ Bm.T) - self.Mq1[idx] @ Bm.T), axis=1)
            D2[idx] = pref * np.sum(ph * (-1j * k * (self.Mp2[idx] @ Bm.T) - self.Mq2[idx] @ Bm.T), axis=1)
        return F, D1, D2


def _pairs_from_chords(cone: ConeGrid, F, D1, D2):
    ch = cone.chord_of_pair
    fwd = cone.forward_direction
    return F[ch], np.where(fwd, D1[ch], D2[ch])


# ---------------------------------------------------------------------------
# Cartesian quadratures


def _cartesian_grid(W: PotentialField, spacing: float):
    rho = W.support_radius
    n = int(np.ceil(2 * rho / spacing))
    dx = 2 * rho / n
    ax = (np.arange(n) + 0.5) * dx - rho
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + W.center_array
    return pts, dx, n


def _grid_spacing(spec: MetricSpec, W: PotentialField, params: SemiclassicalParams,
                  quad: BornQuadrature) -> float:
    probe = W._probe(9)
    cmax = float(spec.factor(probe).max()) if probe.size else 1.0
    return params.h / (quad.points_per_wavelength * abs(params.sigma) * cmax)


def _outer_factors(spec: MetricSpec, nodes: np.ndarray, normals: np.ndarray, pts: np.ndarray,
                   params: SemiclassicalParams, quad: BornQuadrature):
    """``G0(z, y)`` and ``d_nu(z) G0(z, y)`` for boundary nodes z and interior points y."""
    h, sigma = params.h, params.sigma
    if spec.is_flat:
        c = spec.c if spec.kind == "constant-conformal" else 1.0
        diff = nodes[:, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        r = c * dist
        u0 = 1.0 / (4 * np.pi * r)
        dnu_r = np.einsum("nyd,nd->ny", diff, normals) / dist
        dnu_u0 = -u0 * dnu_r / dist / c
    else:
        r, u0, dnu_r, dnu_u0 = _curved_tables(spec, nodes, normals, pts, quad)
    phase = np.exp(-1j * sigma * r / h)
    G = phase * u0 / h**2
    dG = phase * (-1j * sigma / h * dnu_r * u0 + dnu_u0) / h**2
    return G, dG


def _curved_tables(spec, nodes, normals, pts, quad: BornQuadrature, eps: float = 1e-4):
    """Distance, amplitude and their normal derivatives at ``z`` from coarse-grid
    Newton solves interpolated by quintic splines."""
    from .bspline import SplineGrid

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    cen = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max()) + 2 * quad.coarse_spacing
    probe = SplineGrid.from_function(lambda p: np.zeros(len(p)), cen, half, quad.coarse_spacing, 5)
    coarse = probe.node_coordinates().reshape(-1, 3)
    shape = probe.shape
    c_nodes = spec.factor(nodes)
    out_r, out_u0, out_dr, out_du = (np.empty((nodes.shape[0], pts.shape[0])) for _ in range(4))
    for i, (z, nz) in enumerate(zip(nodes, normals)):
        tables = []
        for shift in (0.0, eps):
            src = z - shift * nz
            Wv = solve_exp(spec, src, coarse)
            ex = exp_map(spec, src, Wv)
            r = np.linalg.norm(Wv, axis=1)
            J = spec.factor(ex.X) ** 3 * np.abs(np.linalg.det(ex.DX))
            tables.append((r, 1.0 / (4 * np.pi * r * np.sqrt(J)), Wv))
        (r0, u00, W0), (r1, u01, _) = tables
        dnu_r = -(W0 @ nz) / r0
        # one-sided inward difference for the amplitude slope along the g-unit normal
        dnu_u0 = -(u01 - u00) / (eps * c_nodes[i])
        for arr, vals in ((out_r, r0), (out_u0, u00), (out_dr, dnu_r), (out_du, dnu_u0)):
            sg = SplineGrid.from_samples(vals.reshape(shape), probe.origin, probe.spacing, 5)
            arr[i] = sg(pts)
    return out_r, out_u0, out_dr, out_du


def _born_cartesian(spec: MetricSpec, cone: ConeGrid, W: PotentialField,
                    params: SemiclassicalParams, quad: BornQuadrature):
    spacing = _grid_spacing(spec, W, params, quad)
    pts, dx, n = _cartesian_grid(W, spacing)
    wv = W(pts)
    keep = wv != 0
    pts, wv = pts[keep], wv[keep]
    n_nodes = cone.mesh.size
    need = 16.0 * 2 * n_nodes * pts.shape[0]
    if need > quad.memory_budget:
        raise MemoryBudgetError(f"Cartesian Born quadrature needs {need / 1e9:.2f} GB "
                                f"({pts.shape[0]} points of spacing {dx:.4g} for {n_nodes} nodes)")
    G, dG = _outer_factors(spec, cone.nodes, cone.mesh.normals, pts, params, quad)
    vol = wv * spec.factor(pts) ** 3 * dx**3
    F = params.h**2 * (G * vol[None, :]) @ G.T
    D = params.h**2 * (dG * vol[None, :]) @ G.T
    i, j = cone.pairs[:, 0], cone.pairs[:, 1]
    return F[i, j], D[i, j], {"grid_spacing": dx, "grid_points": int(pts.shape[0])}


def _self_cell(dx: float, k: complex, h: float) -> complex:
    """Cell average of ``exp(-i k |x|) / (4 pi h^2 |x|)`` over a cube of side ``dx``."""
    return (2.380077171 / (4 * np.pi * dx) - 1j * k / (4 * np.pi)) / h**2


def second_born(spec: MetricSpec, cone: ConeGrid, W: PotentialField, params: SemiclassicalParams,
                quad: BornQuadrature = BornQuadrature()) -> tuple[np.ndarray, np.ndarray, dict]:
    """Second Born term ``-h^4 G0 W G0 W G0`` and its normal derivative on cone pairs.

    The inner convolution uses an FFT on a Cartesian grid over the support
    cube with a corrected self cell.
    """
    if not spec.is_flat:
        raise DomainError("the second Born term is implemented for flat metrics")
    if W.is_zero:
        z = np.zeros(cone.n_pairs, dtype=complex)
        return z, z.copy(), {}
    c = spec.c if spec.kind == "constant-conformal" else 1.0
    h, sigma = params.h, params.sigma
    k = sigma * c / h
    spacing = _grid_spacing(spec, W, params, quad)
    pts, dx, n = _cartesian_grid(W, spacing)
    m = 2 * n
    n_nodes = cone.mesh.size
    need = 16.0 * (3 * m**3 + 2 * n_nodes * n**3)
    if need > quad.memory_budget:
        raise MemoryBudgetError(f"second Born term needs {need / 1e9:.2f} GB "
                                f"(grid {n}^3 at spacing {dx:.4g}); raise memory_budget or h")
    wv = W(pts)
    idx = np.fft.fftfreq(m, 1.0 / m)
    off = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), -1) * dx
    dist = np.linalg.norm(off, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.exp(-1j * k * dist) / (4 * np.pi * h**2 * dist)
    K[0, 0, 0] = _self_cell(dx, k, h)
    Khat = np.fft.fftn(K)
    del K, off, dist
    flat = MetricSpec.euclidean()
    kp = SemiclassicalParams(h, sigma * c)
    G, dG = _outer_factors(flat, cone.nodes, cone.mesh.normals, pts, kp, quad)
    vol = dx**3
    F2 = np.zeros((n_nodes, n_nodes), dtype=complex)
    D2 = np.zeros((n_nodes, n_nodes), dtype=complex)
    cols = np.unique(cone.pairs[:, 1])
    buf = np.zeros((m, m, m), dtype=complex)
    for j in cols:
        buf[...] = 0.0
        buf[:n, :n, :n] = (G[j] * wv).reshape(n, n, n)
        u = np.fft.ifftn(np.fft.fftn(buf) * Khat)[:n, :n, :n].reshape(-1) * vol
        src = wv * u * vol
        F2[:, j] = -h**4 * (G @ src)
        D2[:, j] = -h**4 * (dG @ src)
    # scale back to the conformal metric (kernels carry 1/c, volumes c^3)
    F2 *= c**3
    D2 *= c**2
    i, jj = cone.pairs[:, 0], cone.pairs[:, 1]
    return F2[i, jj], D2[i, jj], {"grid_spacing": dx, "grid_n": n}


# ---------------------------------------------------------------------------
# public operations


class BornSynthesizer:
    """Reusable Born kernel generator for one metric, cone and potential.

    Spheroidal moments (flat metrics) are computed on first use and reused
    for every ``h`` and ``sigma``.
    """

    def __init__(self, spec: MetricSpec, cone: ConeGrid, W: PotentialField,
                 quad: BornQuadrature = BornQuadrature()):
        self.spec, self.cone, self.W, self.quad = spec, cone, W, quad
        self._moments: SpheroidalMoments | None = None

    @property
    def moments(self) -> SpheroidalMoments:
        if self._moments is None:
            self._moments = SpheroidalMoments.for_cone(self.spec, self.cone, self.W, self.quad)
        return self._moments

    def first_order(self, params: SemiclassicalParams) -> tuple[np.ndarray, np.ndarray, dict]:
        if self.W.is_zero:
            z = np.zeros(self.cone.n_pairs, dtype=complex)
            return z, z.copy(), {}
        if self.spec.is_flat:
            F, D1, D2 = self.moments.chord_values(params)
            Fp, Dp = _pairs_from_chords(self.cone, F, D1, D2)
            return Fp, Dp, {"method": "spheroidal", "n_cheb": self.quad.n_cheb,
                            "n_x": self.quad.n_x, "n_phi": self.quad.n_phi}
        Fp, Dp, info = _born_cartesian(self.spec, self.cone, self.W, params, self.quad)
        info["method"] = "cartesian"
        return Fp, Dp, info

    def kernel(self, params: SemiclassicalParams, order: int = 1) -> BornKernel:
        if order not in (1, 2):
            raise DomainError("order must be 1 or 2")
        F, D, info = self.first_order(params)
        if order == 2:
            F2, D2, info2 = second_born(self.spec, self.cone, self.W, params, self.quad)
            F, D = F + F2, D + D2
            info = {**info, "second_order": info2}
        meta = {"h": params.h, "sigma": params.sigma, "order": order, "quadrature": info}
        return BornKernel(_kernel_from_pairs(self.cone, F, meta),
                          _kernel_from_pairs(self.cone, D, meta), meta)


def born_kernel(spec: MetricSpec, cone: ConeGrid, params: SemiclassicalParams, W: PotentialField,
                order: int = 1, quad: BornQuadrature = BornQuadrature()) -> BornKernel:
    return BornSynthesizer(spec, cone, W, quad).kernel(params, order)


def born_pairs(spec: MetricSpec, A, B, nu_a, params: SemiclassicalParams, W: PotentialField,
               quad: BornQuadrature = BornQuadrature()) -> tuple[np.ndarray, np.ndarray]:
    """First Born kernel and its normal derivative at ``A`` for arbitrary flat point pairs."""
    nu_a = np.atleast_2d(np.asarray(nu_a, dtype=float))
    mom = SpheroidalMoments(spec, A, B, nu_a, nu_a, W, quad)
    F, D, _ = mom.chord_values(params)
    return F, D


def stationary_weight(spec: MetricSpec, cone: ConeGrid, n_nodes: int = 24) -> WeightField:
    """Ray weight of the stationary-phase reduction.

    Flat metrics give the constant ``1/r``.  Otherwise the profile along each
    chord is tabulated at Chebyshev points of the arc-length fraction and
    interpolated (it is smooth and symmetric under reversal).
    """
    if spec.is_flat:
        return WeightField(per_chord=1.0 / cone.r)
    nc = cone.n_chords
    tn = 0.5 * (1.0 - np.cos(np.pi * (np.arange(n_nodes) + 0.5) / n_nodes))
    table = np.empty((nc, n_nodes))
    Z = cone.nodes
    for s in range(0, nc, 2000):
        sl = slice(s, min(s + 2000, nc))
        m = sl.stop - sl.start
        Zs = np.repeat(Z[cone.chords[sl, 0]], n_nodes, axis=0)
        Zt = np.repeat(Z[cone.chords[sl, 1]], n_nodes, axis=0)
        Ws = np.repeat(cone.w[sl], n_nodes, axis=0)
        frac = np.tile(tn, m)
        det, J1, J2 = phase_hessian_batch(spec, Zs, Zt, Ws, frac, return_spreading=True)
        r = np.repeat(cone.r[sl], n_nodes)
        sarc = frac * r
        table[sl] = (1.0 / (sarc * (r - sarc) * np.sqrt(J1 * J2 * det))).reshape(m, n_nodes)
    # Chebyshev coefficients in u = 2 t - 1 for evaluation anywhere on [0, 1]
    coef = np.polynomial.chebyshev.chebfit(2 * tn - 1, table.T, n_nodes - 1).T

    def profile(chord_idx, t):
        u = 2 * np.asarray(t) - 1
        T = np.polynomial.chebyshev.chebvander(u, n_nodes - 1)
        return np.sum(T * coef[chord_idx], axis=1)

    return WeightField(profile=profile)


def stationary_leading(spec: MetricSpec, cone: ConeGrid, params: SemiclassicalParams,
                       W: PotentialField, weight: WeightField | None = None,
                       constant: complex = STATIONARY_CONSTANT) -> BornKernel:
    """Closed-form stationary-phase leading term of the first Born kernel."""
    weight = stationary_weight(spec, cone) if weight is None else weight
    xw = forward(cone, W, weight).values
    return kernel_from_ray_data(cone, params, xw, constant)


def kernel_from_ray_data(cone: ConeGrid, params: SemiclassicalParams, xw: np.ndarray,
                         constant: complex = STATIONARY_CONSTANT) -> BornKernel:
    """Leading-order kernel and normal derivative built from weighted ray data."""
    h, sigma = params.h, params.sigma
    r = cone.pair_r()
    phase = np.exp(-1j * sigma * r / h)
    F = constant / (h * sigma) * phase * xw
    D = -1j * constant / h**2 * cone.dnu_r() * phase * xw
    meta = {"h": h, "sigma": sigma, "order": 1, "constant": constant, "method": "stationary"}
    return BornKernel(_kernel_from_pairs(cone, F, meta), _kernel_from_pairs(cone, D, meta), meta)


# ---------------------------------------------------------------------------
# two-dimensional stationary phase


def stationary_phase_expand(Q, amplitude, t: float, order: int = 1) -> np.ndarray:
    """Terms ``k = 0..order`` of the stationary phase expansion of
    ``int g(y) exp(i t y.Q y / 2) dy`` over the plane.

    Term ``k`` is ``(2 pi / t) |det Q|^-1/2 exp(i pi sgn(Q) / 4) t^-k
    ((i/2) <Q^-1 d, d>)^k g(0) / k!``.  ``amplitude`` is a sympy expression
    in the symbols ``y1, y2`` or a mapping ``{(a, b): d^a_1 d^b_2 g(0)}``.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (2, 2) or not np.allclose(Q, Q.T):
        raise DomainError("Q must be a symmetric 2x2 matrix")
    if order < 0 or order > 2:
        raise DomainError("order must be 0, 1 or 2")
    ev = np.linalg.eigvalsh(Q)
    if np.min(np.abs(ev)) == 0 or np.max(np.abs(ev)) / np.min(np.abs(ev)) > 1e8:
        raise DomainError("Q is singular or ill-conditioned (condition number above 1e8)")
    y1, y2 = sympy.symbols("y1 y2")
    if isinstance(amplitude, dict):
        def jet(a, b):
            return complex(amplitude.get((a, b), 0.0))
    else:
        expr = sympy.sympify(amplitude)

        def jet(a, b):
            d = expr
            if a:
                d = sympy.diff(d, y1, a)
            if b:
                d = sympy.diff(d, y2, b)
            return complex(d.subs({y1: 0, y2: 0}))
    Qi = np.linalg.inv(Q)
    sgn = int(np.sum(ev > 0) - np.sum(ev < 0))
    pref = 2 * np.pi / t / np.sqrt(abs(np.linalg.det(Q))) * np.exp(1j * np.pi * sgn / 4)
    # operator P = <Q^-1 d, d> = q11 d1^2 + 2 q12 d1 d2 + q22 d2^2, as a polynomial in (d1, d2)
    P = {(2, 0): Qi[0, 0], (1, 1): 2 * Qi[0, 1], (0, 2): Qi[1, 1]}
    poly = {(0, 0): 1.0}
    terms = []
    for k in range(order + 1):
        val = sum(cf * jet(a, b) for (a, b), cf in poly.items())
        terms.append(pref * t ** (-k) * (0.5j) ** k * val / math.factorial(k))
        nxt: dict = {}
        for (a, b), cf in poly.items():
            for (p, q), cp in P.items():
                nxt[(a + p, b + q)] = nxt.get((a + p, b + q), 0.0) + cf * cp
        poly = nxt
    return np.array(terms)


# ---------------------------------------------------------------------------
# boundary Green pairing


def greens_rhs(R_kernel: KernelGrid, dtn_diff: KernelGrid, mesh: BoundaryMesh | ConeGrid) -> KernelGrid:
    """``int_dM R(z, z'') D(z'', z') dA(z'')`` by the mesh quadrature.

    Samples inside either kernel's diagonal band (NaN) are left out of the sum.
    """
    mesh = mesh.mesh if isinstance(mesh, ConeGrid) else mesh
    if (R_kernel.cols.shape != dtn_diff.rows.shape or R_kernel.cols.shape[0] != mesh.size
            or not np.allclose(R_kernel.cols, dtn_diff.rows)
            or not np.allclose(R_kernel.cols, mesh.nodes)):
        raise DomainError("kernel meshes do not match the integration mesh")
    vals = R_kernel.filled(0.0) @ (mesh.weights[:, None] * dtn_diff.filled(0.0))
    return KernelGrid(vals, R_kernel.rows, dtn_diff.cols, {"kind": "greens-pairing"})

