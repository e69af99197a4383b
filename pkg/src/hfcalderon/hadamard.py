"""Semiclassical Hadamard parametrix ``G = exp(-i sigma r / h) (h^-2 U0 + h^-1 U1)``
for ``h^2 (Delta_g + V) - sigma^2`` with the positive Laplacian ``Delta_g``.

Amplitudes are evaluated along the geodesic from the pole ``z'`` (second
argument) to ``z``:

* ``U0 = 1 / (4 pi r sqrt(J))`` with ``J`` the normalized polar density;
* ``U1 = -1 / (8 pi i sigma) (r sqrt(J(r)))^-1 int_0^r sqrt(J) (Delta_g b + V b) ds``
  where ``b = J^(-1/2)``, which solves the first transport equation.

In flat space ``U1`` reduces to ``-(8 pi i sigma)^-1 r^-1`` times the line
integral of ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .boundary import BoundaryMesh
from .errors import BandError, DomainError, NumericalError
from .geometry import BoundaryGeodesic, MetricSpec, exp_map, solve_exp
from .kernelgrid import KernelGrid
from .potential import PotentialField

# fourth-order central stencils on offsets (-2, -1, 0, 1, 2)
_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


@dataclass(frozen=True)
class SemiclassicalParams:
    """Semiclassical parameter ``h`` in (0, 1] and spectral parameter ``sigma``
    with ``Im sigma <= 0``."""

    h: float
    sigma: complex = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigma", complex(self.sigma))
        if not (0.0 < self.h <= 1.0):
            raise DomainError(f"h must lie in (0, 1], got {self.h}")
        if self.sigma == 0:
            raise DomainError("sigma must be nonzero")
        if self.sigma.imag > 0:
            raise DomainError("sigma must satisfy Im sigma <= 0 (decaying resolvent branch)")

    @property
    def wavenumber(self) -> complex:
        return self.sigma / self.h


def stencil_offsets(step: float) -> np.ndarray:
    """The 13 points of the fourth-order 3D Laplacian stencil; row 0 is the center.

    Rows ``1 + 4 a + q`` hold offsets ``(-2, -1, 1, 2)[q] * step`` along axis ``a``.
    """
    out = [np.zeros(3)]
    for a in range(3):
        for q in (-2, -1, 1, 2):
            e = np.zeros(3)
            e[a] = q * step
            out.append(e)
    return np.array(out)


def stencil_derivatives(vals: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean Laplacian and gradient from values on :func:`stencil_offsets`.

    ``vals`` has the 13 stencil points along its last axis.
    """
    c = vals[..., 0]
    lap = np.zeros(c.shape, dtype=vals.dtype)
    grad = np.zeros(c.shape + (3,), dtype=vals.dtype)
    for a in range(3):
        line = np.stack([vals[..., 1 + 4 * a], vals[..., 2 + 4 * a], c,
                         vals[..., 3 + 4 * a], vals[..., 4 + 4 * a]], axis=-1)
        lap = lap + line @ _D2 / step**2
        grad[..., a] = line @ _D1 / step
    return lap, grad


def laplace_beltrami(spec: MetricSpec, center: np.ndarray, vals: np.ndarray, step: float) -> np.ndarray:
    """Positive Laplace-Beltrami operator of a field sampled on the stencil around ``center``:
    ``-c^-2 (Delta_0 u + grad(log c) . grad u)``."""
    lap, grad = stencil_derivatives(vals, step)
    f = spec.log_factor(center, 1)
    c2 = np.exp(2.0 * f[:, 0])
    return -(lap + np.einsum("...a,...a->...", grad, f[:, 1:4])) / c2


def exact_flat_kernel(z, zp, params: SemiclassicalParams):
    """``exp(-i sigma r / h) / (4 pi h^2 r)``, the outgoing kernel of ``(h^2 Delta - sigma^2)^-1``."""
    r = np.linalg.norm(np.asarray(z, dtype=float) - np.asarray(zp, dtype=float), axis=-1)
    if np.any(r <= 0):
        raise DomainError("coincident points")
    val = np.exp(-1j * params.sigma * r / params.h) / (4.0 * np.pi * params.h**2 * r)
    return complex(val) if np.ndim(val) == 0 else val


@dataclass
class Amplitudes:
    """Distances and h-independent amplitudes for a batch of (target, pole) pairs.

    ``u1_sigma`` is ``sigma * U1``, which does not depend on ``sigma``.
    """

    r: np.ndarray
    u0: np.ndarray
    u1_sigma: np.ndarray

    def kernel(self, params: SemiclassicalParams) -> np.ndarray:
        h, s = params.h, params.sigma
        return np.exp(-1j * s * self.r / h) * (self.u0 / h**2 + self.u1_sigma / (s * h))


def _gl_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def flat_line_integral(V: PotentialField, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean line integrals of ``V`` along segments ``A -> B`` (exact for the spline)."""
    A = np.ascontiguousarray(np.atleast_2d(A), dtype=float)
    B = np.ascontiguousarray(np.atleast_2d(B), dtype=float)
    if V is None or V.is_zero:
        return np.zeros(A.shape[0])
    g = V.grid
    gx, gw = np.polynomial.legendre.leggauss((3 * g.order + 1) // 2 + 1)
    return _backend.kernels.line_integrals_spline(g.coef, g.origin, g.spacing, g.order,
                                                  V.center_array, V.support_radius, A, B, gx, gw)


def amplitudes(spec: MetricSpec, targets, poles, V: PotentialField | None = None,
               nodes_per_length: float = 64.0, min_nodes: int = 16,
               stencil: float = 0.02) -> Amplitudes:
    """Evaluate ``r``, ``U0`` and ``sigma * U1`` for pairs ``(targets[m], poles[m])``.

    On curved metrics ``Delta_g b`` is taken by a fourth-order stencil of width
    ``stencil`` around each Gauss node; the node count is
    ``max(min_nodes, nodes_per_length * max r)`` for the whole batch.
    """
    T = np.ascontiguousarray(np.atleast_2d(targets), dtype=float)
    P = np.ascontiguousarray(np.broadcast_to(np.asarray(poles, dtype=float), T.shape))
    m = T.shape[0]
    if spec.is_flat:
        d = np.linalg.norm(T - P, axis=1)
        if np.any(d <= 0):
            raise DomainError("coincident points")
        r = spec.c * d if spec.kind == "constant-conformal" else d
        u0 = 1.0 / (4.0 * np.pi * r)
        u1s = -flat_line_integral(V, P, T) / d / (8j * np.pi)
        return Amplitudes(r, u0, u1s.astype(complex))

    W = solve_exp(spec, P, T)
    r = np.linalg.norm(W, axis=1)
    if np.any(r <= 0):
        raise DomainError("coincident points")
    ex = exp_map(spec, P, W)
    J_end = spec.factor(ex.X) ** 3 * np.abs(np.linalg.det(ex.DX))
    u0 = 1.0 / (4.0 * np.pi * r * np.sqrt(J_end))

    nq = max(int(min_nodes), int(np.ceil(nodes_per_length * r.max())))
    tq, wq = _gl_unit(nq)
    Pq = np.repeat(P, nq, axis=0)
    Wq = (W[:, None, :] * tq[None, :, None]).reshape(-1, 3)
    exq = exp_map(spec, Pq, Wq)
    Yq = exq.X
    Jq = spec.factor(Yq) ** 3 * np.abs(np.linalg.det(exq.DX))

    offs = stencil_offsets(stencil)[1:]
    pts = (Yq[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    dW = np.linalg.solve(exq.DX[:, None, :, :], np.broadcast_to(offs[None, :, :, None],
                                                               (Yq.shape[0], 12, 3, 1)))[..., 0]
    W0 = (Wq[:, None, :] + dW).reshape(-1, 3)
    Ps = np.repeat(Pq, 12, axis=0)
    Ws = solve_exp(spec, Ps, pts, W0=W0)
    exs = exp_map(spec, Ps, Ws)
    Js = spec.factor(exs.X) ** 3 * np.abs(np.linalg.det(exs.DX))
    b = np.concatenate([Jq[:, None] ** -0.5, Js.reshape(-1, 12) ** -0.5], axis=1)
    lap_b = laplace_beltrami(spec, Yq, b, stencil)
    vq = np.zeros(Yq.shape[0]) if V is None else V(Yq)
    integrand = np.sqrt(Jq) * (lap_b + vq * b[:, 0])
    if not np.all(np.isfinite(integrand)):
        raise NumericalError("non-finite amplitude integrand")
    integral = (integrand.reshape(m, nq) @ wq) * r
    u1s = -integral / (r * np.sqrt(J_end)) / (8j * np.pi)
    return Amplitudes(r, u0, u1s)


def _pair_args(spec, geo_or_z, zp):
    if isinstance(geo_or_z, BoundaryGeodesic):
        return geo_or_z.z, geo_or_z.zp
    if zp is None:
        raise ValueError("second point required")
    return np.asarray(geo_or_z, dtype=float), np.asarray(zp, dtype=float)


def u0(spec: MetricSpec, geo_or_z, zp=None) -> float:
    """Leading amplitude ``(4 pi r)^-1 J^-1/2`` (real, positive)."""
    z, zp = _pair_args(spec, geo_or_z, zp)
    return float(amplitudes(spec, z[None], zp[None]).u0[0])


def u1(spec: MetricSpec, geo_or_z, zp=None, V: PotentialField | None = None,
       sigma: complex = 1.0, **quad) -> complex:
    """First-order amplitude ``U1(z, z')`` for spectral parameter ``sigma``."""
    z, zp = _pair_args(spec, geo_or_z, zp)
    return complex(amplitudes(spec, z[None], zp[None], V, **quad).u1_sigma[0] / complex(sigma))


def _check_band(spec: MetricSpec, z, zp):
    d = np.linalg.norm(np.atleast_2d(z) - np.atleast_2d(zp), axis=1)
    if np.any(d <= spec.band):
        raise BandError(f"pair inside the diagonal band (chord {d.min():.4g} <= {spec.band:.4g})")


def parametrix_kernel(spec: MetricSpec, z, zp, params: SemiclassicalParams,
                      V: PotentialField | None = None, **quad) -> complex:
    """``G(sigma, h, z, z')`` for a single pair outside the diagonal band."""
    z = np.asarray(z, dtype=float); zp = np.asarray(zp, dtype=float)
    _check_band(spec, z, zp)
    return complex(amplitudes(spec, z[None], zp[None], V, **quad).kernel(params)[0])


def kernel_grid(spec: MetricSpec, rows: np.ndarray, cols: np.ndarray, params: SemiclassicalParams,
                V: PotentialField | None = None, exact: bool = False, **quad) -> KernelGrid:
    """Parametrix (or, with ``exact``, the flat closed form) on all off-band pairs."""
    rows = np.atleast_2d(rows); cols = np.atleast_2d(cols)
    Z = np.repeat(rows, cols.shape[0], axis=0)
    Zp = np.tile(cols, (rows.shape[0], 1))
    keep = np.linalg.norm(Z - Zp, axis=1) > spec.band
    vals = np.full(Z.shape[0], np.nan + 0j)
    if keep.any():
        if exact:
            if not spec.is_flat:
                raise DomainError("exact kernel is only available for flat metrics")
            scale = spec.c if spec.kind == "constant-conformal" else 1.0
            kp = SemiclassicalParams(params.h, params.sigma)
            vals[keep] = exact_flat_kernel(scale * Z[keep], scale * Zp[keep], kp)
        else:
            vals[keep] = amplitudes(spec, Z[keep], Zp[keep], V, **quad).kernel(params)
    meta = {"h": params.h, "sigma": params.sigma, "band": spec.band,
            "kind": "exact-flat" if exact else "parametrix"}
    return KernelGrid(vals.reshape(rows.shape[0], cols.shape[0]), rows, cols, meta)


def _stencil_inside(spec: MetricSpec, z: np.ndarray, step: float):
    d = np.linalg.norm(np.atleast_2d(z) - spec.center_array, axis=1)
    if np.any(d + 2.0 * step > spec.radius):
        raise DomainError("finite-difference stencil leaves the domain (boundary proximity)")


def residual_kernel(spec: MetricSpec, z, zp, params: SemiclassicalParams,
                    V: PotentialField | None = None, step: float = 0.01, **quad) -> complex:
    """``exp(-i sigma r / h) (Delta_g + V) U1`` in the first variable, by finite differences."""
    z = np.asarray(z, dtype=float); zp = np.asarray(zp, dtype=float)
    _check_band(spec, z, zp)
    _stencil_inside(spec, z, step)
    return complex(_residual_batch(spec, z[None], zp[None], params, V, step, **quad)[0])


def _residual_batch(spec, Z, Zp, params, V, step, **quad):
    offs = stencil_offsets(step)
    pts = (Z[:, None, :] + offs[None]).reshape(-1, 3)
    amp = amplitudes(spec, pts, np.repeat(Zp, 13, axis=0), V, **quad)
    u1v = (amp.u1_sigma / params.sigma).reshape(-1, 13)
    op = laplace_beltrami(spec, Z, u1v, step)
    if V is not None:
        op = op + V(Z) * u1v[:, 0]
    return np.exp(-1j * params.sigma * amp.r.reshape(-1, 13)[:, 0] / params.h) * op


def pde_residual(spec: MetricSpec, targets, poles, hs, sigma: complex,
                 V: PotentialField | None = None, step: float = 0.005, **quad) -> dict:
    """Apply ``h^2 (Delta_g + V) - sigma^2`` to ``G(., z')`` at each target by a
    fourth-order stencil, for every ``h`` in ``hs``.

    Amplitudes are computed once and reused across ``h``.  Returns
    ``{"h", "residual" (n_h, m), "predicted" (n_h, m)}`` where ``predicted`` is
    ``h`` times the residual kernel.
    """
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    P = np.ascontiguousarray(np.broadcast_to(np.asarray(poles, dtype=float), T.shape))
    _stencil_inside(spec, T, step)
    offs = stencil_offsets(step)
    pts = (T[:, None, :] + offs[None]).reshape(-1, 3)
    amp = amplitudes(spec, pts, np.repeat(P, 13, axis=0), V, **quad)
    vT = np.zeros(T.shape[0]) if V is None else V(T)
    res, pred = [], []
    sigma = complex(sigma)
    for h in hs:
        prm = SemiclassicalParams(h, sigma)
        G = amp.kernel(prm).reshape(-1, 13)
        op = h**2 * (laplace_beltrami(spec, T, G, step) + vT * G[:, 0]) - sigma**2 * G[:, 0]
        res.append(op)
        u1v = (amp.u1_sigma / sigma).reshape(-1, 13)
        E = laplace_beltrami(spec, T, u1v, step) + vT * u1v[:, 0]
        pred.append(h * np.exp(-1j * sigma * amp.r.reshape(-1, 13)[:, 0] / h) * E)
    return {"h": np.asarray(hs, dtype=float), "residual": np.array(res), "predicted": np.array(pred)}


def boundary_kernel_grid(spec: MetricSpec, mesh: BoundaryMesh, params: SemiclassicalParams,
                         V: PotentialField | None = None, exact: bool = False, **quad) -> KernelGrid:
    """Kernel samples on all off-band ordered pairs of a boundary mesh."""
    kg = kernel_grid(spec, mesh.nodes, mesh.nodes, params, V, exact=exact, **quad)
    kg.meta["boundary"] = mesh.describe()
    return kg
