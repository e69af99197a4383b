"""Conformal Riemannian metrics on a ball: geodesics, two-point connection,
Jacobi spreading and the transverse Hessian of the two-point phase.

Every metric handled here has the form ``g = c(x)^2 * I`` on the closed ball
``|x - center| <= radius``.  Internally the metric is described by
``phi = log c`` and its first two derivatives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import _backend
from .bspline import SplineGrid
from .errors import BandError, DomainError, SolverError

FLAT_KINDS = ("euclidean", "constant-conformal")
ANALYTIC_KINDS = ("hyperbolic", "gaussian-bump", "exp-quadratic")
KINDS = FLAT_KINDS + ("grid-conformal",) + ANALYTIC_KINDS

_KIND_CODE = {"euclidean": 0, "constant-conformal": 0, "grid-conformal": 1,
              "exp-quadratic": 2, "hyperbolic": 3, "gaussian-bump": 4}
_DUMMY_COEF = np.zeros((2, 2, 2))


@dataclass(frozen=True)
class MetricSpec:
    """Conformally Euclidean metric ``c(x)^2 dx^2`` on a closed ball.

    Parameters
    ----------
    kind
        ``euclidean``, ``constant-conformal`` (uses ``c``) or
        ``grid-conformal`` (uses ``log_c``).  The analytic kinds
        ``hyperbolic``, ``gaussian-bump`` and ``exp-quadratic`` (parameters in
        ``params``) serve as validation backends with closed-form derivatives.
    band
        Chordal width of the excluded diagonal band; defaults to
        ``0.2 * diameter``.
    n_steps
        RK4 steps used by the exponential map on curved metrics.
    """

    kind: str = "euclidean"
    c: float = 1.0
    log_c: SplineGrid | None = None
    params: tuple = ()
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    band: float | None = None
    curvature_tol: float = 1e-6
    n_steps: int = 64
    _prm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown metric kind {self.kind!r}")
        if self.kind == "constant-conformal" and not self.c > 0:
            raise DomainError("conformal factor must be positive")
        if self.kind == "grid-conformal" and self.log_c is None:
            raise DomainError("grid-conformal metric needs sampled log c")
        if self.radius <= 0:
            raise DomainError("radius must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.band is None:
            object.__setattr__(self, "band", 0.4 * self.radius)
        cen = list(self.center)
        if self.kind == "euclidean":
            prm = [0.0]
        elif self.kind == "constant-conformal":
            prm = [np.log(self.c)]
        elif self.kind == "grid-conformal":
            prm = [0.0]
        elif self.kind == "exp-quadratic":
            prm = [self.params[0]] + cen
        elif self.kind == "hyperbolic":
            k, a = self.params
            if a <= self.radius:
                raise DomainError("hyperbolic model radius must exceed the domain radius")
            prm = [k, a] + cen
        else:
            prm = list(self.params[:2]) + cen
        object.__setattr__(self, "_prm", np.asarray(prm, dtype=float))

    # constructors -----------------------------------------------------------
    @classmethod
    def euclidean(cls, **kw) -> "MetricSpec":
        return cls(kind="euclidean", **kw)

    @classmethod
    def constant_conformal(cls, c: float, **kw) -> "MetricSpec":
        return cls(kind="constant-conformal", c=float(c), **kw)

    @classmethod
    def grid_conformal(cls, c_func: Callable[[np.ndarray], np.ndarray], spacing: float = 0.05,
                       order: int = 5, pad: float = 1.0, center=(0.0, 0.0, 0.0),
                       radius: float = 1.0, **kw) -> "MetricSpec":
        """Sample a positive conformal factor on a padded cube and interpolate ``log c``."""

        def logc(pts):
            v = np.asarray(c_func(pts), dtype=float)
            if not np.all(v > 0):
                raise DomainError(f"conformal factor not positive (min sample {v.min():.3g})")
            return np.log(v)

        grid = SplineGrid.from_function(logc, center, radius + pad, spacing, order)
        return cls(kind="grid-conformal", log_c=grid, center=center, radius=radius, **kw)

    @classmethod
    def hyperbolic(cls, curvature_scale: float = 1.0, model_radius: float = 2.0, **kw):
        """Poincare-ball metric of constant curvature ``-curvature_scale**2``."""
        return cls(kind="hyperbolic", params=(float(curvature_scale), float(model_radius)), **kw)

    @classmethod
    def gaussian_bump(cls, amplitude: float, width: float, **kw) -> "MetricSpec":
        """``c = 1 + amplitude * exp(-|x - center|^2 / width^2)``."""
        return cls(kind="gaussian-bump", params=(float(amplitude), float(width)), **kw)

    @classmethod
    def exp_quadratic(cls, alpha: float, **kw) -> "MetricSpec":
        """``c = exp(alpha * |x - center|^2)``."""
        return cls(kind="exp-quadratic", params=(float(alpha),), **kw)

    # evaluation -------------------------------------------------------------
    @property
    def is_flat(self) -> bool:
        return self.kind in FLAT_KINDS

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center)

    def kernel_args(self) -> tuple:
        if self.kind == "grid-conformal":
            s = self.log_c
            return (_KIND_CODE[self.kind], self._prm, s.coef, s.origin, s.spacing, s.order)
        return (_KIND_CODE[self.kind], self._prm, _DUMMY_COEF, np.zeros(3), 1.0, 1)

    def log_factor(self, pts, nderiv: int = 0) -> np.ndarray:
        """``log c`` with derivatives, shape (m, 10); see :meth:`SplineGrid.evaluate`."""
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
        return _backend.kernels.phi_eval(*self.kernel_args(), pts, nderiv)

    def factor(self, pts) -> np.ndarray:
        return np.exp(self.log_factor(pts, 0)[:, 0])

    def steps(self) -> int:
        return 1 if self.is_flat else int(self.n_steps)


@dataclass(frozen=True)
class MetricSample:
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det: float
    christoffel: np.ndarray


@dataclass(frozen=True)
class ShotPath:
    s: np.ndarray
    x: np.ndarray
    velocity: np.ndarray
    exit_point: np.ndarray
    length: float


@dataclass(frozen=True)
class BoundaryGeodesic:
    """Connecting geodesic between boundary points ``z`` and ``zp``.

    ``w`` is the initial velocity in a g-orthonormal frame at ``z`` scaled to
    length ``r`` (normal coordinates of ``zp`` about ``z``).  Tangents are
    g-unit coordinate vectors.
    """

    spec: MetricSpec
    z: np.ndarray
    zp: np.ndarray
    r: float
    w: np.ndarray
    tangent_at_z: np.ndarray
    tangent_at_zp: np.ndarray
    s: np.ndarray
    path: np.ndarray
    jacobi_det: np.ndarray


# ---------------------------------------------------------------------------
# metric tensor and curvature


def _check_inside(spec: MetricSpec, pts: np.ndarray, slack: float = 1e-9) -> None:
    d = np.linalg.norm(pts - spec.center_array, axis=-1)
    if np.any(d > spec.radius * (1.0 + slack)):
        raise DomainError(f"point outside the domain ball (distance {d.max():.6g})")


def christoffel(spec: MetricSpec, pts) -> np.ndarray:
    """Christoffel symbols ``G[m, k, i, j]`` of the conformal metric at points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    dphi = spec.log_factor(pts, 1)[:, 1:4]
    eye = np.eye(3)
    return (eye[None, :, :, None] * dphi[:, None, None, :]
            + eye[None, :, None, :] * dphi[:, None, :, None]
            - eye[None, None, :, :] * dphi[:, :, None, None])


def eval_metric(spec: MetricSpec, p) -> MetricSample:
    p = np.asarray(p, dtype=float).reshape(3)
    _check_inside(spec, p[None])
    c = float(spec.factor(p[None])[0])
    g = c * c * np.eye(3)
    return MetricSample(g=g, g_inv=np.eye(3) / (c * c), sqrt_det=c**3,
                        christoffel=christoffel(spec, p[None])[0])


def riemann(spec: MetricSpec, p, step: float = 1e-4) -> np.ndarray:
    """Riemann tensor ``R[l, k, i, j]`` (``R(d_i, d_j) d_k = R^l_kij d_l``) by
    central differences of the Christoffel symbols."""
    p = np.asarray(p, dtype=float).reshape(3)
    offs = np.concatenate([p + step * np.eye(3), p - step * np.eye(3), p[None]])
    G = christoffel(spec, offs)
    dG = (G[:3] - G[3:6]) / (2.0 * step)  # dG[i, l, j, k] = d_i Gamma^l_jk
    G0 = G[6]
    R = (np.einsum("iljk->lkij", dG) - np.einsum("jlik->lkij", dG)
         + np.einsum("lim,mjk->lkij", G0, G0) - np.einsum("ljm,mik->lkij", G0, G0))
    return R


def sectional_curvature(spec: MetricSpec, p, plane, step: float = 1e-4) -> float:
    """Sectional curvature of the plane spanned by two tangent vectors at ``p``."""
    X, Y = (np.asarray(v, dtype=float) for v in plane)
    p = np.asarray(p, dtype=float)
    c2 = float(spec.factor(p[None])[0]) ** 2
    gram = c2 * c2 * (X @ X * (Y @ Y) - (X @ Y) ** 2)
    if gram <= 1e-24 * max(c2 * c2 * (X @ X) * (Y @ Y), 1e-300):
        raise DomainError("degenerate plane")
    R = riemann(spec, p, step)
    RXYY = np.einsum("lkij,i,j,k->l", R, X, Y, Y)
    return float(c2 * RXYY @ X / gram)


def _probe_points(spec: MetricSpec, n: int = 24) -> np.ndarray:
    rng = np.random.default_rng(12345)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    rad = spec.radius * 0.95 * rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
    return spec.center_array + v * rad[:, None]


def check_metric(spec: MetricSpec, probes=None) -> dict:
    """Probe curvature sign and boundary convexity.

    Positive curvature above ``spec.curvature_tol`` triggers a warning, as
    does a non-convex boundary probe.  Returns the probe maxima.
    """
    pts = _probe_points(spec) if probes is None else np.atleast_2d(probes)
    kmax = -np.inf
    if not spec.is_flat:
        planes = [(np.eye(3)[a], np.eye(3)[b]) for a, b in ((0, 1), (0, 2), (1, 2))]
        for p in pts:
            for pl in planes:
                kmax = max(kmax, sectional_curvature(spec, p, pl))
        if kmax > spec.curvature_tol:
            warnings.warn(f"positive sectional curvature {kmax:.3e} at probe points",
                          RuntimeWarning, stacklevel=2)
    else:
        kmax = 0.0
    # second fundamental form of the sphere is proportional to 1/R + d_n log c
    rng = np.random.default_rng(7)
    nrm = rng.standard_normal((64, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    bpts = spec.center_array + spec.radius * nrm
    conv = 1.0 / spec.radius + np.sum(spec.log_factor(bpts, 1)[:, 1:4] * nrm, axis=1)
    if conv.min() <= 0:
        warnings.warn("boundary sphere is not strictly convex at probe points",
                      RuntimeWarning, stacklevel=2)
    return {"max_curvature": float(kmax), "min_convexity": float(conv.min())}


# ---------------------------------------------------------------------------
# geodesic flow


def _accel(spec: MetricSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    g = spec.log_factor(x, 1)[:, 1:4]
    gu = np.sum(g * u, axis=1)[:, None]
    return -2.0 * gu * u + np.sum(u * u, axis=1)[:, None] * g


def _rk4(spec, x, u, ds):
    def f(xx, uu):
        return uu, _accel(spec, xx, uu)

    k1 = f(x, u)
    k2 = f(x + 0.5 * ds * k1[0], u + 0.5 * ds * k1[1])
    k3 = f(x + 0.5 * ds * k2[0], u + 0.5 * ds * k2[1])
    k4 = f(x + ds * k3[0], u + ds * k3[1])
    return (x + ds * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0,
            u + ds * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0)


def shoot_geodesic(spec: MetricSpec, p, v, max_len: float | None = None,
                   step: float = 0.01) -> ShotPath:
    """Integrate the unit-speed geodesic from ``p`` with g-unit velocity ``v``
    until it leaves the ball.

    Fixed-step RK4 in arc length; the last step is shortened so that the
    path ends exactly on the boundary sphere.
    """
    p = np.asarray(p, dtype=float).reshape(1, 3)
    v = np.asarray(v, dtype=float).reshape(1, 3)
    _check_inside(spec, p)
    speed = float(spec.factor(p)[0] * np.linalg.norm(v))
    if abs(speed - 1.0) > 1e-10:
        raise DomainError(f"initial vector is not g-unit (|v|_g = {speed:.12g})")
    if max_len is None:
        max_len = 50.0 * spec.radius * float(spec.factor(spec.center_array[None])[0])
    cen, R = spec.center_array, spec.radius
    xs, us, ss = [p[0]], [v[0]], [0.0]
    x, u, s = p, v, 0.0
    while True:
        xn, un = _rk4(spec, x, u, step)
        if np.linalg.norm(xn[0] - cen) >= R:
            def gap(frac):
                return np.linalg.norm(_rk4(spec, x, u, frac * step)[0][0] - cen) - R

            if gap(0.0) >= 0.0:
                frac = 0.0
            else:
                frac = brentq(gap, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            xn, un = _rk4(spec, x, u, frac * step)
            s += frac * step
            xs.append(xn[0]); us.append(un[0]); ss.append(s)
            break
        x, u, s = xn, un, s + step
        xs.append(x[0]); us.append(u[0]); ss.append(s)
        if s > max_len:
            raise SolverError(f"geodesic did not exit within max_len={max_len}")
    x_arr = np.array(xs)
    return ShotPath(s=np.array(ss), x=x_arr, velocity=np.array(us), exit_point=x_arr[-1],
                    length=float(s))


# ---------------------------------------------------------------------------
# exponential map and two-point connection


@dataclass
class ExpResult:
    X: np.ndarray
    U: np.ndarray
    DX: np.ndarray
    DU: np.ndarray
    path: np.ndarray | None = None
    path_jac: np.ndarray | None = None


def exp_map(spec: MetricSpec, P, W, n_steps: int | None = None, jac: bool = True,
            record: bool = False) -> ExpResult:
    """Exponential map at ``P`` applied to g-orthonormal-frame vectors ``W``.

    The geodesic is integrated over unit time with coordinate velocity
    ``W / c(P)``, so ``|W|`` is its length.  ``DX = dX/dW`` and ``DU = dU/dW``.
    With ``record`` the states at every step are returned in ``path``
    (positions and velocities) and ``path_jac`` (``dx(t)/dW``).
    """
    W = np.ascontiguousarray(np.atleast_2d(W), dtype=float)
    P = np.ascontiguousarray(np.broadcast_to(np.asarray(P, dtype=float), W.shape))
    m = W.shape[0]
    n = spec.steps() if n_steps is None else int(n_steps)
    X = np.zeros((m, 3)); U = np.zeros((m, 3))
    DX = np.zeros((m, 3, 3)); DU = np.zeros((m, 3, 3))
    path = np.zeros((m if record else 0, n + 1, 6))
    pj = np.zeros((m if record and jac else 0, n + 1, 9))
    _backend.kernels.exp_map(*spec.kernel_args(), P, W, n, bool(jac), X, U, DX, DU, path, pj)
    return ExpResult(X, U, DX, DU, path if record else None, pj if record and jac else None)


def _initial_guess(spec: MetricSpec, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    t = np.linspace(0.0, 1.0, 9)
    pts = P[:, None, :] + t[None, :, None] * (Q - P)[:, None, :]
    cm = spec.factor(pts.reshape(-1, 3)).reshape(pts.shape[:2])
    wt = np.full(9, 2.0); wt[0] = wt[-1] = 1.0; wt[1::2] = 4.0
    cbar = cm @ wt / wt.sum()
    return (Q - P) * cbar[:, None]


def solve_exp(spec: MetricSpec, P, Q, W0=None, n_steps: int | None = None, tol: float = 1e-13,
              max_iter: int = 40) -> np.ndarray:
    """Batched damped Newton for ``exp_P(W) = Q``; returns ``W`` with ``|W| = r``.

    Rows that fail to converge are retried by continuation of the target
    along the chord from ``P`` to ``Q``.
    """
    Q = np.ascontiguousarray(np.atleast_2d(Q), dtype=float)
    P = np.ascontiguousarray(np.broadcast_to(np.asarray(P, dtype=float), Q.shape))
    if spec.is_flat:
        return (Q - P) * spec.c if spec.kind == "constant-conformal" else Q - P
    W = _initial_guess(spec, P, Q) if W0 is None else np.array(W0, dtype=float)
    W, ok, res = _newton(spec, P, Q, W, n_steps, tol, max_iter)
    for idx in np.flatnonzero(~ok):
        W[idx], good, rr = _continuation(spec, P[idx], Q[idx], n_steps, tol, max_iter)
        if not good:
            raise SolverError(f"two-point connection failed for pair {idx}", rr)
    return W


def _newton(spec, P, Q, W, n_steps, tol, max_iter):
    scale = np.maximum(1.0, np.linalg.norm(Q - P, axis=1))
    ex = exp_map(spec, P, W, n_steps)
    res = np.linalg.norm(ex.X - Q, axis=1)
    active = res > tol * scale
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        try:
            dW = np.linalg.solve(ex.DX[idx], (Q[idx] - ex.X[idx])[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            dW = np.stack([np.linalg.lstsq(D, q - x, rcond=None)[0]
                           for D, q, x in zip(ex.DX[idx], Q[idx], ex.X[idx])])
        lam = np.ones(idx.size)
        pending = np.arange(idx.size)
        for _half in range(12):
            rows = idx[pending]
            trial = exp_map(spec, P[rows], W[rows] + lam[pending, None] * dW[pending], n_steps)
            tres = np.linalg.norm(trial.X - Q[rows], axis=1)
            better = (tres < res[rows]) | (tres <= tol * scale[rows])
            acc = pending[better]
            arows = idx[acc]
            W[arows] += lam[acc, None] * dW[acc]
            res[arows] = tres[better]
            ex.X[arows], ex.U[arows] = trial.X[better], trial.U[better]
            ex.DX[arows], ex.DU[arows] = trial.DX[better], trial.DU[better]
            pending = pending[~better]
            if pending.size == 0:
                break
            lam[pending] *= 0.5
        stalled = np.zeros(P.shape[0], bool)
        stalled[idx[pending]] = True
        active = (res > tol * scale) & ~stalled
    ok = res <= np.maximum(tol * scale, 1e-11 * scale)
    return W, ok, res


def _continuation(spec, p, q, n_steps, tol, max_iter, n_stage: int = 16):
    w = None
    for tau in np.linspace(0.0, 1.0, n_stage + 1)[1:]:
        target = p + tau * (q - p)
        w0 = _initial_guess(spec, p[None], target[None]) if w is None else w * tau / (tau - 1.0 / n_stage)
        w, ok, res = _newton(spec, p[None], target[None], w0, n_steps, tol, max_iter)
        if not ok[0] and tau < 1.0:
            continue
    return w[0], bool(ok[0]), float(res[0])


def connect(spec: MetricSpec, z, zp, n_samples: int | None = None) -> BoundaryGeodesic:
    """Connecting geodesic between two boundary points outside the diagonal band."""
    z = np.asarray(z, dtype=float).reshape(3)
    zp = np.asarray(zp, dtype=float).reshape(3)
    cen, R = spec.center_array, spec.radius
    for q in (z, zp):
        if abs(np.linalg.norm(q - cen) - R) > 1e-8 * R:
            raise DomainError("connect expects points on the boundary sphere")
    if np.linalg.norm(z - zp) <= spec.band:
        raise BandError(f"pair inside the diagonal band (chord {np.linalg.norm(z - zp):.4g})")
    w = solve_exp(spec, z, zp[None])[0]
    return _geodesic_from_w(spec, z, zp, w, n_samples)


def _geodesic_from_w(spec, z, zp, w, n_samples=None):
    n = max(spec.steps(), 64) if n_samples is None else int(n_samples) - 1
    if spec.is_flat:
        ex = exp_map(spec, z, w[None], n_steps=n, record=True)
    else:
        # same integrator resolution as the Newton solve, refined by an integer factor
        base = spec.steps()
        n = base * max(1, int(np.ceil(n / base)))
        ex = exp_map(spec, z, w[None], n_steps=n, record=True)
    r = float(np.linalg.norm(w))
    t = np.linspace(0.0, 1.0, n + 1)
    xs = ex.path[0, :, :3]
    cx = spec.factor(xs)
    Y = ex.path_jac[0].reshape(-1, 3, 3)
    J = np.ones(n + 1)
    J[1:] = cx[1:] ** 3 * np.abs(np.linalg.det(Y[1:])) / t[1:] ** 3
    c0 = cx[0]
    U1 = ex.U[0]
    return BoundaryGeodesic(spec=spec, z=z, zp=zp, r=r, w=w, tangent_at_z=w / (r * c0),
                            tangent_at_zp=U1 / (spec.factor(ex.X)[0] * np.linalg.norm(U1)),
                            s=r * t, path=xs, jacobi_det=J)


def distance_gradients(geo: BoundaryGeodesic) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of ``r`` at both endpoints (g-unit vectors) and the outward
    normal derivative ``<grad_z r, nu(z)>_g``."""
    spec = geo.spec
    grad_z = -geo.tangent_at_z
    grad_zp = geo.tangent_at_zp.copy()
    nrm = (geo.z - spec.center_array) / spec.radius
    c = float(spec.factor(geo.z[None])[0])
    return grad_z, grad_zp, float(c * grad_z @ nrm)


def jacobi_spreading(geo: BoundaryGeodesic, s) -> np.ndarray | float:
    """Normalized transverse Jacobi determinant ``J(s)`` along the geodesic.

    ``J = c(x)^3 |det dexp_z(w)|`` at ``w = (s / r) * geo.w``, equal to the
    polar volume density divided by ``s^2`` and tending to 1 as ``s -> 0``.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s_arr <= 0) or np.any(s_arr > geo.r * (1 + 1e-12)):
        raise DomainError("arc length outside (0, r]")
    J = spreading(geo.spec, geo.z, geo.w[None] * (s_arr / geo.r)[:, None])
    return float(J[0]) if np.ndim(s) == 0 else J


def spreading(spec: MetricSpec, P, W, n_steps: int | None = None) -> np.ndarray:
    """``J`` at ``exp_P(W)`` for a batch of vectors ``W``."""
    if spec.is_flat:
        return np.ones(np.atleast_2d(W).shape[0])
    ex = exp_map(spec, P, W, n_steps)
    return spec.factor(ex.X) ** 3 * np.abs(np.linalg.det(ex.DX))


# ---------------------------------------------------------------------------
# transverse Hessian of the two-point phase


def transverse_frame(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two Euclidean-orthonormal vectors orthogonal to ``tangent`` (batched)."""
    t = np.atleast_2d(tangent)
    t = t / np.linalg.norm(t, axis=1)[:, None]
    helper = np.where(np.abs(t[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = helper - np.sum(helper * t, axis=1)[:, None] * t
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    return e1, np.cross(t, e1)


def distance_hessian(spec: MetricSpec, P, W, n_steps: int | None = None) -> tuple[np.ndarray, ...]:
    """Covariant Hessian of ``y -> r(P, y)`` at ``y = exp_P(W)`` from Jacobi fields.

    Returns ``(Y, H, T, J)``: endpoints, the bilinear form in coordinates, the
    g-unit tangent of the geodesic at the endpoint and the spreading ``J``.
    """
    W = np.atleast_2d(W)
    ex = exp_map(spec, P, W, n_steps)
    r = np.linalg.norm(W, axis=1)
    G = ex.U / r[:, None]
    dG = ex.DU / r[:, None, None] - np.einsum("mi,mj->mij", ex.U, W) / r[:, None, None] ** 3
    dGdy = np.linalg.solve(np.transpose(ex.DX, (0, 2, 1)), np.transpose(dG, (0, 2, 1)))
    dGdy = np.transpose(dGdy, (0, 2, 1))  # dGdy[m, k, j] = d G^k / d y^j
    Gam = christoffel(spec, ex.X)
    nabla = dGdy + np.einsum("mkjl,ml->mkj", Gam, G)
    c2 = spec.factor(ex.X) ** 2
    H = c2[:, None, None] * np.transpose(nabla, (0, 2, 1))  # H[m, j, k] = g(nabla_j G, d_k)
    T = G / (np.sqrt(c2) * np.linalg.norm(G, axis=1))[:, None]
    J = c2**1.5 * np.abs(np.linalg.det(ex.DX))
    return ex.X, 0.5 * (H + np.transpose(H, (0, 2, 1))), T, J


def phase_hessian_batch(spec: MetricSpec, Z, Zpp, W, frac, return_spreading: bool = False):
    """2x2 transverse Hessian determinants of ``r(z, .) + r(., z'')`` at
    ``exp_z(frac * W)``, via Jacobi fields, for batches of pairs.

    With ``return_spreading`` also returns ``J(z, y)`` and ``J(z'', y)``.
    """
    frac = np.asarray(frac, dtype=float)
    Z = np.atleast_2d(Z); Zpp = np.atleast_2d(Zpp); W = np.atleast_2d(W)
    Y, H1, T, J1 = distance_hessian(spec, Z, W * frac[:, None])
    W2 = solve_exp(spec, Zpp, Y)
    _, H2, _, J2 = distance_hessian(spec, Zpp, W2)
    c = spec.factor(Y)
    e1, e2 = transverse_frame(T)
    e1 /= c[:, None]; e2 /= c[:, None]
    H = H1 + H2
    h11 = np.einsum("mi,mij,mj->m", e1, H, e1)
    h22 = np.einsum("mi,mij,mj->m", e2, H, e2)
    h12 = np.einsum("mi,mij,mj->m", e1, H, e2)
    det = h11 * h22 - h12 * h12
    return (det, J1, J2) if return_spreading else det


def phase_hessian_det(spec: MetricSpec, z, zpp, s: float, method: str = "fd",
                      margin: float = 0.02, step: float | None = None) -> float:
    """Determinant of the transverse Hessian of ``r(z, y) + r(y, z'')`` at
    ``y = gamma(s)`` on the connecting geodesic.

    ``method='fd'`` uses second differences in a g-orthonormal transverse
    frame with Richardson extrapolation over steps ``eps`` and ``eps/2``
    (``eps = step`` or ``1e-3 r``); ``method='jacobi'`` uses Jacobi fields.
    ``margin`` is the excluded fraction of ``r`` at either end.
    """
    geo = connect(spec, z, zpp)
    r = geo.r
    if not (margin * r <= s <= (1.0 - margin) * r):
        raise DomainError(f"s={s:.4g} within margin {margin} of an endpoint (r={r:.4g})")
    frac = np.array([s / r])
    if method == "jacobi":
        return float(phase_hessian_batch(spec, geo.z[None], geo.zp[None], geo.w[None], frac)[0])
    if method != "fd":
        raise ValueError(f"unknown method {method!r}")
    ex = exp_map(spec, geo.z, geo.w[None] * frac[0])
    y = ex.X[0]
    c = float(spec.factor(y[None])[0])
    e1, e2 = transverse_frame(ex.U[0])
    e1 = e1[0] / c; e2 = e2[0] / c
    eps = 1e-3 * r if step is None else step
    offsets = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float)
    w_to_y = geo.w * frac[0]
    ex2 = solve_exp(spec, geo.zp, y[None])[0]

    def hess(e):
        pts = y + e * (offsets[:, :1] * e1 + offsets[:, 1:] * e2)
        r1 = np.linalg.norm(solve_exp(spec, geo.z, pts, W0=np.tile(w_to_y, (9, 1))), axis=1)
        r2 = np.linalg.norm(solve_exp(spec, geo.zp, pts, W0=np.tile(ex2, (9, 1))), axis=1)
        f = (r1 + r2).reshape(3, 3)
        h11 = (f[2, 1] - 2 * f[1, 1] + f[0, 1]) / e**2
        h22 = (f[1, 2] - 2 * f[1, 1] + f[1, 0]) / e**2
        h12 = (f[2, 2] - f[2, 0] - f[0, 2] + f[0, 0]) / (4 * e**2)
        return np.array([[h11, h12], [h12, h22]])

    H = (4.0 * hess(0.5 * eps) - hess(eps)) / 3.0
    return float(np.linalg.det(H))


def boundary_normal(spec: MetricSpec, z) -> np.ndarray:
    """Euclidean outward unit normal of the boundary sphere at ``z``."""
    z = np.atleast_2d(z)
    n = z - spec.center_array
    return n / np.linalg.norm(n, axis=1)[:, None]
