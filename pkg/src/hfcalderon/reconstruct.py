"""Potential reconstruction from boundary kernel data: extraction of weighted
ray data from the normal-derivative kernel, ray-transform inversion, and
h-convergence sweeps."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .boundary import BoundaryMesh
from .errors import DomainError, NumericalError
from .geometry import MetricSpec
from .hadamard import SemiclassicalParams
from .kernelgrid import KernelGrid
from .potential import PotentialField
from .scatter import (STATIONARY_CONSTANT, BornKernel, BornQuadrature, BornSynthesizer,
                      kernel_from_ray_data, stationary_weight)
from .xray import ConeGrid, InteriorGrid, RayData, RayTransform, build_cone, forward

REFERENCE_CENTER = (0.1, 0.05, -0.05)


def reference_potential() -> PotentialField:
    """Gaussian used for calibration: width 0.5, support radius 0.75, off-center."""
    return PotentialField.gaussian(1.0, 0.5, REFERENCE_CENTER, support_radius=0.75)


@dataclass
class Calibration:
    """Fitted leading-term constant with its fit diagnostics."""

    constant: complex
    relative_residual: float
    h: float
    sigma: complex

    @property
    def deviation(self) -> float:
        """Relative distance from the analytic flat constant."""
        return abs(self.constant - STATIONARY_CONSTANT) / abs(STATIONARY_CONSTANT)


def fit_constant(born: np.ndarray, basis: np.ndarray) -> tuple[complex, float]:
    """Least-squares ``C`` in ``born ~ C * basis``; returns ``C`` and the relative residual."""
    denom = np.vdot(basis, basis)
    if denom == 0:
        raise NumericalError("calibration basis vanishes")
    C = complex(np.vdot(basis, born) / denom)
    resid = float(np.linalg.norm(born - C * basis) / np.linalg.norm(born))
    return C, resid


def calibrate_constant(params: SemiclassicalParams, quad: BornQuadrature = BornQuadrature(),
                       mesh_size: tuple[int, int] = (6, 12), max_residual: float = 0.5) -> Calibration:
    """Fit the stationary-phase constant between Born quadrature and the
    closed-form leading term on the flat reference scenario.

    Deterministic in its arguments and cached per ``(h, sigma, quad, mesh_size)``.
    """
    return _calibrate(float(params.h), complex(params.sigma), quad, tuple(mesh_size), float(max_residual))


@lru_cache(maxsize=32)
def _calibrate(h, sigma, quad, mesh_size, max_residual) -> Calibration:
    spec = MetricSpec.euclidean()
    cone = build_cone(spec, BoundaryMesh(*mesh_size))
    W = reference_potential()
    params = SemiclassicalParams(h, sigma)
    F, _, _ = BornSynthesizer(spec, cone, W, quad).first_order(params)
    unit = kernel_from_ray_data(cone, params, forward(cone, W, stationary_weight(spec, cone)).values,
                                constant=1.0)
    basis, _ = unit.pair_values(cone)
    C, resid = fit_constant(F, basis)
    if resid > max_residual:
        raise NumericalError(f"calibration residual {resid:.3g} exceeds {max_residual}")
    return Calibration(C, resid, h, sigma)


def extract_ray_data(D, cone: ConeGrid, params: SemiclassicalParams,
                     constant: complex = STATIONARY_CONSTANT, floor: float = 1e-3) -> RayData:
    """Weighted ray data from the boundary-normal derivative kernel.

    Each pair value is divided by ``-i C h^-2 d_nu r exp(-i sigma r / h)``,
    the leading term of the normal-derivative kernel.
    """
    if isinstance(D, BornKernel):
        D = D.dnu
    vals = D.values[cone.pairs[:, 0], cone.pairs[:, 1]] if isinstance(D, KernelGrid) else np.asarray(D)
    if vals.shape != (cone.n_pairs,):
        raise DomainError("kernel data does not match the cone")
    dnu_r = cone.dnu_r()
    if np.min(np.abs(dnu_r)) < floor:
        raise DomainError(f"normal derivative of the distance falls below {floor} on retained pairs")
    h, sigma = params.h, params.sigma
    lead = -1j * constant / h**2 * dnu_r * np.exp(-1j * sigma * cone.pair_r() / h)
    out = np.where(np.isfinite(vals), vals, 0.0) / lead
    return RayData(out, cone.pairs)


@dataclass
class ReconstructionResult:
    """Reconstructed field on the interior grid with per-stage diagnostics."""

    field: np.ndarray
    grid: InteriorGrid
    ray_data: RayData
    inversion: dict
    constant: complex
    error: float | None = None
    timings: dict = field(default_factory=dict)

    def save(self, out_dir, stem: str = "reconstruction") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        bin_path = out_dir / f"{stem}_field.bin"
        inter = np.empty(self.field.shape + (2,), dtype="<f8")
        inter[..., 0] = self.field.real
        inter[..., 1] = self.field.imag
        bin_path.write_bytes(inter.tobytes())
        meta = {
            "shape": list(self.field.shape),
            "dtype": "complex as interleaved little-endian float64 (re, im), C order (x, y, z)",
            "grid": {"n": self.grid.n, "center": list(self.grid.center),
                     "half_width": self.grid.half_width},
            "constant": {"re": self.constant.real, "im": self.constant.imag},
            "relative_error": self.error,
            "inversion": {k: v for k, v in self.inversion.items() if k != "residuals"},
            "timings": self.timings,
        }
        json_path = out_dir / f"{stem}_metrics.json"
        json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
        diag_path = out_dir / f"{stem}_inversion.json"
        diag_path.write_text(json.dumps({"iters": self.inversion["iters"],
                                         "residuals": [float(r) for r in self.inversion["residuals"]],
                                         "discrepancy": self.inversion["discrepancy"]}, indent=1))
        return [bin_path, json_path, diag_path] + self.ray_data.save_binary(out_dir / f"{stem}_raydata")


def relative_l2(estimate: np.ndarray, truth: np.ndarray) -> float:
    norm = np.linalg.norm(truth)
    return float(np.linalg.norm(estimate - truth) / norm) if norm > 0 else float(np.linalg.norm(estimate))


def reconstruct_potential(D, cone: ConeGrid, params: SemiclassicalParams, alpha: float = 1e-4,
                          maxiter: int = 200, tol: float = 1e-8,
                          constant: complex = STATIONARY_CONSTANT,
                          transform: RayTransform | None = None,
                          truth: PotentialField | None = None) -> ReconstructionResult:
    """Extract weighted ray data from ``D`` and invert the weighted ray transform.

    The complex extracted data is inverted as is, so the imaginary part of the
    field measures the leading-order error.  ``transform`` may be shared
    across calls with the same cone.
    """
    t0 = time.perf_counter()
    data = extract_ray_data(D, cone, params, constant)
    t1 = time.perf_counter()
    op = transform or RayTransform(cone, weight=stationary_weight(cone.spec, cone))
    t2 = time.perf_counter()
    f, diag = op.invert(data.values, alpha=alpha, maxiter=maxiter, tol=tol)
    t3 = time.perf_counter()
    err = relative_l2(f, op.sample(truth)) if truth is not None else None
    return ReconstructionResult(op.to_grid(f), op.grid, data, diag, complex(constant), err,
                                {"extract": t1 - t0, "operator": t2 - t1, "invert": t3 - t2})


@dataclass
class ConvergenceTable:
    """Rows of ``(h, relative error, stage timings)`` with the fitted log-log slope."""

    rows: list
    slope: float
    source: str

    def save_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["h", "relative_error", "kernel_seconds", "invert_seconds"])
            for r in self.rows:
                wr.writerow([repr(r["h"]), repr(r["error"]), f"{r['kernel_seconds']:.3f}",
                             f"{r['invert_seconds']:.3f}"])
        return path


def loglog_slope(hs, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    x, y = np.log(np.asarray(hs, dtype=float)), np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def sweep_h(spec: MetricSpec, cone: ConeGrid, W: PotentialField, hs, sigma: complex = 4.0,
            source: str = "born", alpha: float = 1e-4, maxiter: int = 200, tol: float = 1e-8,
            quad: BornQuadrature = BornQuadrature(), grid: InteriorGrid | None = None,
            support: tuple | None = None) -> ConvergenceTable:
    """Reconstruction error against ``h`` for Born (``source='born'``) or
    leading-term (``source='stationary'``) data.

    Moments of the Born quadrature and the ray-transform matrix are built once.
    """
    hs = [float(h) for h in hs]
    if len(hs) < 3 or any(b >= a for a, b in zip(hs, hs[1:])):
        raise DomainError("sweep needs at least three decreasing h values")
    if source not in ("born", "stationary"):
        raise DomainError(f"unknown data source {source!r}")
    weight = stationary_weight(spec, cone)
    op = RayTransform(cone, grid=grid, support=support, weight=weight)
    truth = op.sample(W)
    synth = BornSynthesizer(spec, cone, W, quad) if source == "born" else None
    xw = forward(cone, W, weight).values if source == "stationary" else None
    rows = []
    for h in hs:
        params = SemiclassicalParams(h, sigma)
        t0 = time.perf_counter()
        kern = synth.kernel(params) if synth is not None else kernel_from_ray_data(cone, params, xw)
        t1 = time.perf_counter()
        res = reconstruct_potential(kern, cone, params, alpha, maxiter, tol, transform=op)
        t2 = time.perf_counter()
        err = relative_l2(res.field.ravel()[op.node_index], truth)
        rows.append({"h": h, "error": err, "kernel_seconds": t1 - t0, "invert_seconds": t2 - t1,
                     "iters": res.inversion["iters"]})
    errs = [r["error"] for r in rows]
    slope = loglog_slope(hs, errs) if min(errs) > 0 else 0.0
    return ConvergenceTable(rows, slope, source)
