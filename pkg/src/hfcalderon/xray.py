"""Weighted geodesic ray transforms parametrized by ordered boundary pairs.

Data live on ordered pairs ``(i, j)`` of boundary mesh nodes outside the
diagonal band, with the measure pulled back from the inward unit sphere
bundle: ``mu_ij = |<xi, nu>(z_i)| |<xi', nu>(z_j)| dA_i dA_j / (r^2 J(r))``.
Interior fields are trilinear interpolants on a regular grid restricted to
a support ball; line integrals of trilinear fields along straight chords are
computed exactly.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _backend
from .boundary import BoundaryMesh
from .errors import DomainError, SolverError
from .geometry import MetricSpec, exp_map, solve_exp
from .hadamard import flat_line_integral
from .potential import PotentialField


# ---------------------------------------------------------------------------
# cone of boundary pairs


@dataclass
class ConeGrid:
    """Boundary pairs outside the diagonal band with their measure and geodesics.

    ``chords`` lists unordered pairs ``i < j``; ordered pair ``p`` runs along
    ``chords[chord_of_pair[p]]`` from ``pairs[p, 0]`` to ``pairs[p, 1]``.
    ``w`` holds initial vectors at ``z_i`` (g-orthonormal frame, ``|w| = r``)
    and ``tangent_end`` the g-unit tangent at ``z_j`` for each chord.
    """

    spec: MetricSpec
    mesh: BoundaryMesh
    band: float
    chords: np.ndarray
    pairs: np.ndarray
    chord_of_pair: np.ndarray
    mu: np.ndarray
    r: np.ndarray
    w: np.ndarray
    tangent_start: np.ndarray
    tangent_end: np.ndarray
    jacobi_end: np.ndarray
    nodes: np.ndarray = field(repr=False, default=None)

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def n_chords(self) -> int:
        return self.chords.shape[0]

    @property
    def forward_direction(self) -> np.ndarray:
        """True for ordered pairs that run from the lower to the higher node index."""
        return self.pairs[:, 0] < self.pairs[:, 1]

    def dnu_r(self) -> np.ndarray:
        """``<grad_z r, nu(z)>_g`` at the first point of each ordered pair."""
        spec = self.spec
        nrm = self.mesh.normals
        c = spec.factor(self.nodes)
        fwd = self.forward_direction
        ch = self.chord_of_pair
        grad = np.where(fwd[:, None], -self.tangent_start[ch], self.tangent_end[ch])
        i = self.pairs[:, 0]
        return c[i] * np.sum(grad * nrm[i], axis=1)

    def total_measure(self) -> float:
        return float(self.mu.sum())

    def pair_r(self) -> np.ndarray:
        return self.r[self.chord_of_pair]


def build_cone(spec: MetricSpec, mesh: BoundaryMesh, band: float | None = None) -> ConeGrid:
    """Solve every off-band boundary pair and compute its measure weight."""
    if min(mesh.n_theta, mesh.n_phi) < 4 or mesh.n_phi < 8:
        raise DomainError("boundary resolution must give at least 8 nodes per great circle")
    if not np.allclose(mesh.center, spec.center) or not np.isclose(mesh.radius, spec.radius):
        raise DomainError("boundary mesh does not match the metric domain")
    band = spec.band if band is None else float(band)
    Z = mesh.nodes
    n = Z.shape[0]
    iu, ju = np.triu_indices(n, 1)
    keep = np.linalg.norm(Z[iu] - Z[ju], axis=1) > band
    chords = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    nc = chords.shape[0]
    A, B = Z[chords[:, 0]], Z[chords[:, 1]]
    c_nodes = spec.factor(Z)
    if nc == 0:
        W = np.zeros((0, 3)); r = np.zeros(0); Jend = np.zeros(0)
        t0 = np.zeros((0, 3)); t1 = np.zeros((0, 3))
    elif spec.is_flat:
        W = (B - A) * c_nodes[0]
        r = np.linalg.norm(W, axis=1)
        Jend = np.ones(nc)
        t0 = W / (r * c_nodes[0])[:, None]
        t1 = t0.copy()
    else:
        W = np.empty((nc, 3))
        failed = []
        for s in range(0, nc, 20000):
            sl = slice(s, min(s + 20000, nc))
            try:
                W[sl] = solve_exp(spec, A[sl], B[sl])
            except SolverError:
                for k in range(sl.start, sl.stop):
                    try:
                        W[k] = solve_exp(spec, A[k], B[k][None])[0]
                    except SolverError:
                        failed.append((int(chords[k, 0]), int(chords[k, 1])))
        if failed:
            raise SolverError(f"geodesic solve failed for pairs {failed[:10]}")
        r = np.linalg.norm(W, axis=1)
        Jend = np.empty(nc)
        t1 = np.empty((nc, 3))
        for s in range(0, nc, 20000):
            sl = slice(s, min(s + 20000, nc))
            ex = exp_map(spec, A[sl], W[sl])
            cX = spec.factor(ex.X)
            Jend[sl] = cX**3 * np.abs(np.linalg.det(ex.DX))
            t1[sl] = ex.U / (cX * np.linalg.norm(ex.U, axis=1))[:, None]
        t0 = W / (r * c_nodes[chords[:, 0]])[:, None]
    nrm = mesh.normals
    cos0 = np.abs(np.sum(t0 * nrm[chords[:, 0]], axis=1)) * c_nodes[chords[:, 0]]
    cos1 = np.abs(np.sum(t1 * nrm[chords[:, 1]], axis=1)) * c_nodes[chords[:, 1]]
    area = mesh.weights * c_nodes**2
    mu_c = cos0 * cos1 * area[chords[:, 0]] * area[chords[:, 1]] / (r**2 * Jend)
    pairs = np.concatenate([chords, chords[:, ::-1]])
    cop = np.concatenate([np.arange(nc), np.arange(nc)])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return ConeGrid(spec=spec, mesh=mesh, band=band, chords=chords, pairs=pairs[order],
                    chord_of_pair=cop[order], mu=np.concatenate([mu_c, mu_c])[order], r=r, w=W,
                    tangent_start=t0, tangent_end=t1, jacobi_end=Jend, nodes=Z)


# ---------------------------------------------------------------------------
# data containers


@dataclass
class RayData:
    """Values on the ordered pairs of a cone."""

    values: np.ndarray
    pairs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.pairs = np.asarray(self.pairs, dtype=np.int64)
        if self.values.shape != (self.pairs.shape[0],):
            raise DomainError("ray data must have one value per pair")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("ray data contains non-finite values")

    def save_csv(self, path) -> Path:
        path = Path(path)
        v = self.values.astype(complex)
        arr = np.column_stack([self.pairs[:, 0], self.pairs[:, 1], v.real, v.imag])
        np.savetxt(path, arr, delimiter=",", header="i,j,re,im", comments="",
                   fmt=["%d", "%d", "%.17g", "%.17g"])
        return path

    @classmethod
    def load_csv(cls, path) -> "RayData":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        vals = arr[:, 2] + 1j * arr[:, 3]
        if not np.any(arr[:, 3]):
            vals = arr[:, 2].copy()
        return cls(vals, arr[:, :2].astype(np.int64))

    def save_binary(self, path) -> list[Path]:
        path = Path(path)
        v = self.values.astype(complex)
        data = np.empty((v.size, 2), dtype="<f8")
        data[:, 0], data[:, 1] = v.real, v.imag
        bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
        bin_path.write_bytes(data.tobytes())
        json_path.write_text(json.dumps({"n_pairs": int(v.size), "pairs": self.pairs.tolist(),
                                         "complex": bool(np.iscomplexobj(self.values))}))
        return [bin_path, json_path]

    @classmethod
    def load_binary(cls, path) -> "RayData":
        path = Path(path)
        desc = json.loads(path.with_suffix(".json").read_text())
        raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").reshape(-1, 2)
        vals = raw[:, 0] + 1j * raw[:, 1] if desc["complex"] else raw[:, 0].copy()
        return cls(vals, np.asarray(desc["pairs"], dtype=np.int64))


@dataclass
class WeightField:
    """Ray weight: one value per chord (``per_chord``) or a callable profile.

    ``profile(chord_index, t)`` returns the weight at fraction ``t`` of the
    arc length; it must be symmetric under ``t -> 1 - t`` so that both
    orientations of a chord share it.
    """

    per_chord: np.ndarray | None = None
    profile: object = None

    @property
    def is_constant(self) -> bool:
        return self.profile is None

    def at(self, chord_idx: np.ndarray, t: np.ndarray) -> np.ndarray:
        if self.profile is not None:
            return np.asarray(self.profile(chord_idx, t), dtype=float)
        return self.per_chord[chord_idx]


def inner_cone(cone: ConeGrid, d, e) -> complex:
    """``<d, e>_C = sum_p mu_p d_p conj(e_p)``."""
    d = d.values if isinstance(d, RayData) else np.asarray(d)
    e = e.values if isinstance(e, RayData) else np.asarray(e)
    return complex(np.sum(cone.mu * d * np.conj(e)))


# ---------------------------------------------------------------------------
# forward transform of smooth potentials


def _geodesic_nodes(cone: ConeGrid, chord_ids: np.ndarray, per_length: float, min_nodes: int = 8):
    """Quadrature nodes along curved geodesics by cubic Hermite interpolation of the RK4 path."""
    spec = cone.spec
    nq = max(min_nodes, int(np.ceil(per_length * cone.r[chord_ids].max())))
    gx, gw = np.polynomial.legendre.leggauss(nq)
    t = 0.5 * (gx + 1.0); wt = 0.5 * gw
    A = cone.nodes[cone.chords[chord_ids, 0]]
    ex = exp_map(spec, A, cone.w[chord_ids], jac=False, record=True)
    N = ex.path.shape[1] - 1
    k = np.minimum((t * N).astype(int), N - 1)
    s = t * N - k
    x0 = ex.path[:, k, :3]; x1 = ex.path[:, k + 1, :3]
    v0 = ex.path[:, k, 3:] / N; v1 = ex.path[:, k + 1, 3:] / N
    h00 = 2 * s**3 - 3 * s**2 + 1; h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2; h11 = s**3 - s**2
    pts = (h00[None, :, None] * x0 + h10[None, :, None] * v0 + h01[None, :, None] * x1
           + h11[None, :, None] * v1)
    return pts, t, wt


def forward(cone: ConeGrid, f: PotentialField, w: WeightField | None = None,
            per_length: float = 96.0) -> RayData:
    """Weighted ray transform ``int W f ds`` of a smooth potential on every ordered pair."""
    spec = cone.spec
    vals_c = np.zeros(cone.n_chords)
    if not f.is_zero and cone.n_chords:
        A = cone.nodes[cone.chords[:, 0]]
        B = cone.nodes[cone.chords[:, 1]]
        if spec.is_flat and (w is None or w.is_constant):
            vals_c = flat_line_integral(f, A, B) * spec.c
            if w is not None:
                vals_c = vals_c * w.per_chord
        else:
            vals_c = _curved_forward(cone, f, w, per_length)
    return RayData(vals_c[cone.chord_of_pair], cone.pairs)


def _curved_forward(cone, f, w, per_length, chunk: int = 4000):
    out = np.zeros(cone.n_chords)
    ids = np.arange(cone.n_chords)
    for s in range(0, ids.size, chunk):
        cid = ids[s:s + chunk]
        if cone.spec.is_flat:
            nq = max(8, int(np.ceil(per_length * cone.r[cid].max())))
            gx, gw = np.polynomial.legendre.leggauss(nq)
            t = 0.5 * (gx + 1.0); wt = 0.5 * gw
            A = cone.nodes[cone.chords[cid, 0]]; B = cone.nodes[cone.chords[cid, 1]]
            pts = A[:, None, :] + t[None, :, None] * (B - A)[:, None, :]
        else:
            pts, t, wt = _geodesic_nodes(cone, cid, per_length)
        vals = f(pts.reshape(-1, 3)).reshape(cid.size, t.size)
        if w is not None:
            vals = vals * w.at(np.repeat(cid, t.size), np.tile(t, cid.size)).reshape(cid.size, t.size)
        out[cid] = (vals @ wt) * cone.r[cid]
    return out


# ---------------------------------------------------------------------------
# discrete transform on an interior grid


@dataclass(frozen=True)
class InteriorGrid:
    """Regular ``n^3`` node grid covering the cube around the domain ball."""

    n: int = 48
    center: tuple = (0.0, 0.0, 0.0)
    half_width: float = 1.0

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.center) - self.half_width

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    def coordinates(self) -> np.ndarray:
        ax = np.arange(self.n) * self.spacing
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + self.origin


class RayTransform:
    """Discrete weighted ray transform ``X`` from grid fields on a support ball to cone data.

    Unknowns are node values of a trilinear interpolant at grid nodes inside
    ``support`` (center, radius).  ``<f, g>_M = dV sum f g``; the adjoint is
    exact with respect to this and the cone inner product.
    """

    def __init__(self, cone: ConeGrid, grid: InteriorGrid | None = None,
                 support: tuple | None = None, weight: WeightField | None = None,
                 per_length: float | None = None):
        spec = cone.spec
        self.cone = cone
        self.grid = grid or InteriorGrid(48, spec.center, spec.radius)
        if support is None:
            support = (spec.center, 0.9 * spec.radius)
        self.support = (np.asarray(support[0], dtype=float), float(support[1]))
        self.weight = weight
        X = self.grid.coordinates()
        inside = np.linalg.norm(X - self.support[0], axis=1) <= self.support[1]
        self.node_index = np.flatnonzero(inside)
        colmap = np.full(self.grid.n**3, -1, dtype=np.int64)
        colmap[self.node_index] = np.arange(self.node_index.size)
        self.colmap = colmap
        self.n_unknowns = self.node_index.size
        self.matrix = self._assemble(per_length)
        ch = cone.chord_of_pair
        self._pair_chord = ch
        # collapse the two orientations of each chord
        self._chord_mu = np.bincount(ch, weights=cone.mu, minlength=cone.n_chords)

    def _assemble(self, per_length):
        cone, g = self.cone, self.grid
        spec = cone.spec
        A = np.ascontiguousarray(cone.nodes[cone.chords[:, 0]])
        B = np.ascontiguousarray(cone.nodes[cone.chords[:, 1]])
        n = g.n
        if cone.n_chords == 0:
            return sp.csr_matrix((0, self.n_unknowns))
        if spec.is_flat and (self.weight is None or self.weight.is_constant):
            wrow = np.full(cone.n_chords, spec.c)
            if self.weight is not None:
                wrow = wrow * self.weight.per_chord
            indptr, indices, data = _backend.kernels.ray_matrix_chords(
                A, B, np.ascontiguousarray(wrow), g.origin, g.spacing, n, self.colmap,
                self.support[0], self.support[1] + np.sqrt(3.0) * g.spacing)
        else:
            per_length = 4.0 / g.spacing if per_length is None else per_length
            parts = []
            for s in range(0, cone.n_chords, 4000):
                cid = np.arange(s, min(s + 4000, cone.n_chords))
                if spec.is_flat:
                    nq = max(8, int(np.ceil(per_length * cone.r[cid].max())))
                    gx, gw = np.polynomial.legendre.leggauss(nq)
                    t = 0.5 * (gx + 1.0); wt = 0.5 * gw
                    pts = A[cid][:, None, :] + t[None, :, None] * (B[cid] - A[cid])[:, None, :]
                else:
                    pts, t, wt = _geodesic_nodes(cone, cid, per_length)
                qw = np.tile(wt, cid.size) * np.repeat(cone.r[cid], t.size)
                if self.weight is not None:
                    qw = qw * self.weight.at(np.repeat(cid, t.size), np.tile(t, cid.size))
                rowptr = np.arange(cid.size + 1, dtype=np.int64) * t.size
                ip, ix, dt = _backend.kernels.ray_matrix_nodes(
                    np.ascontiguousarray(pts.reshape(-1, 3)), np.ascontiguousarray(qw), rowptr,
                    g.origin, g.spacing, n, self.colmap)
                parts.append(sp.csr_matrix((dt, ix, ip), shape=(cid.size, self.n_unknowns)))
            return sp.vstack(parts).tocsr()
        return sp.csr_matrix((data, indices, indptr), shape=(cone.n_chords, self.n_unknowns))

    # grid fields ---------------------------------------------------------
    def to_grid(self, f: np.ndarray) -> np.ndarray:
        """Embed unknowns into the full ``n^3`` node array (zero outside the support)."""
        full = np.zeros(self.grid.n**3, dtype=np.asarray(f).dtype)
        full[self.node_index] = f
        return full.reshape((self.grid.n,) * 3)

    def sample(self, f: PotentialField) -> np.ndarray:
        """Node values of a potential on the unknowns."""
        return f(self.grid.coordinates()[self.node_index])

    def inner_field(self, f, g) -> complex:
        return complex(self.grid.cell_volume * np.sum(f * np.conj(g)))

    # operators -------------------------------------------------------------
    def apply(self, f: np.ndarray) -> np.ndarray:
        """Cone data (one value per ordered pair) of a grid field."""
        return (self.matrix @ f)[self._pair_chord]

    def adjoint(self, d) -> np.ndarray:
        d = d.values if isinstance(d, RayData) else np.asarray(d)
        folded = np.bincount(self._pair_chord, weights=(self.cone.mu * d).real,
                             minlength=self.cone.n_chords)
        if np.iscomplexobj(d):
            folded = folded + 1j * np.bincount(self._pair_chord, weights=(self.cone.mu * d).imag,
                                               minlength=self.cone.n_chords)
        return (self.matrix.T @ folded) / self.grid.cell_volume

    def normal(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ (self._chord_mu * (self.matrix @ f))) / self.grid.cell_volume

    def invert(self, d, alpha: float = 1e-4, maxiter: int = 200, tol: float = 1e-8,
               x0: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
        """Tikhonov-regularized CG on ``(X*X + alpha I) f = X* d``.

        Returns the solution and diagnostics ``{iters, residuals, discrepancy,
        converged}``; ``residuals`` are relative to ``|X* d|``.
        """
        if alpha < 0:
            raise DomainError("alpha must be nonnegative")
        d_vals = d.values if isinstance(d, RayData) else np.asarray(d)
        b = self.adjoint(d_vals)
        x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
        bnorm = np.linalg.norm(b)
        history: list[float] = []
        if bnorm == 0:
            return x, {"iters": 0, "residuals": [0.0], "discrepancy": float(_cone_norm(self.cone, d_vals)),
                       "converged": True}

        def op(v):
            return self.normal(v) + alpha * v

        res = b - op(x)
        p = res.copy()
        rr = np.vdot(res, res).real
        history.append(np.sqrt(rr) / bnorm)
        best, best_res = x.copy(), history[-1]
        it = 0
        while it < maxiter and history[-1] > tol:
            Ap = op(p)
            a = rr / np.vdot(p, Ap).real
            x = x + a * p
            res = res - a * Ap
            rr_new = np.vdot(res, res).real
            history.append(np.sqrt(rr_new) / bnorm)
            p = res + (rr_new / rr) * p
            rr = rr_new
            it += 1
            if history[-1] < best_res:
                best, best_res = x.copy(), history[-1]
        converged = history[-1] <= tol
        if not converged:
            warnings.warn(f"CG stopped after {it} iterations at relative residual {history[-1]:.2e}",
                          RuntimeWarning, stacklevel=2)
            x = best
        disc = _cone_norm(self.cone, self.apply(x) - d_vals)
        return x, {"iters": it, "residuals": history, "discrepancy": float(disc),
                   "converged": bool(converged)}


def _cone_norm(cone: ConeGrid, d) -> float:
    return float(np.sqrt(np.sum(cone.mu * np.abs(d) ** 2)))


def adjoint(cone: ConeGrid, d, w: WeightField | None = None, **kw) -> np.ndarray:
    """Measure-weighted backprojection onto the full interior grid."""
    op = RayTransform(cone, weight=w, **kw)
    return op.to_grid(op.adjoint(d))


def invert(cone: ConeGrid, d, w: WeightField | None = None, alpha: float = 1e-4,
           maxiter: int = 200, tol: float = 1e-8, operator: RayTransform | None = None, **kw):
    """Regularized inversion; returns the full-grid field and diagnostics."""
    op = operator or RayTransform(cone, weight=w, **kw)
    f, diag = op.invert(d, alpha=alpha, maxiter=maxiter, tol=tol)
    return op.to_grid(f), diag


def h1_norm(cone: ConeGrid, d) -> float:
    """Discrete H^1 norm on the cone: measure-weighted values plus differences
    between pairs whose endpoints are mesh neighbours."""
    d = d.values if isinstance(d, RayData) else np.asarray(d)
    mesh = cone.mesh
    n = mesh.size
    lookup = -np.ones((n, n), dtype=np.int64)
    lookup[cone.pairs[:, 0], cone.pairs[:, 1]] = np.arange(cone.n_pairs)
    nodes = mesh.nodes
    total = np.sum(cone.mu * np.abs(d) ** 2)
    for a, b in mesh.neighbors():
        step = np.linalg.norm(nodes[a] - nodes[b])
        for which in (0, 1):
            p = lookup[a, :] if which == 0 else lookup[:, a]
            q = lookup[b, :] if which == 0 else lookup[:, b]
            ok = (p >= 0) & (q >= 0)
            mu = 0.5 * (cone.mu[p[ok]] + cone.mu[q[ok]])
            total += np.sum(mu * np.abs(d[p[ok]] - d[q[ok]]) ** 2) / step**2
    return float(np.sqrt(total))


def write_diagnostics(path, diag: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps({k: (list(map(float, v)) if isinstance(v, list) else v)
                                for k, v in diag.items()}, indent=1))
    return path
