"""Time the compiled kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--repeat N] [--json out.json]``
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from hfcalderon import _backend, _fallback
from hfcalderon.boundary import BoundaryMesh
from hfcalderon.bspline import SplineGrid
from hfcalderon.geometry import MetricSpec, exp_map
from hfcalderon.hadamard import SemiclassicalParams, flat_line_integral
from hfcalderon.potential import PotentialField
from hfcalderon.scatter import BornQuadrature, born_pairs
from hfcalderon.xray import InteriorGrid, RayTransform, build_cone


def _unit(rows):
    rows = np.asarray(rows, dtype=float)
    return rows / np.linalg.norm(rows, axis=1)[:, None]


def cases():
    """Named zero-argument workloads, one per kernel."""
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.8, 0.8, (20000, 3))
    ax = np.arange(24.0)
    grid = SplineGrid.from_samples(np.cos(np.add.outer(np.add.outer(ax, 0.5 * ax), -0.7 * ax) / 5),
                                   (-1.2, -1.2, -1.2), 0.1, 3)
    curved = MetricSpec.exp_quadratic(0.1)
    P = np.tile([0.0, 0.0, -1.0], (200, 1))
    W = rng.uniform(-0.3, 0.3, (200, 3)) + [0.0, 0.0, 1.2]
    bump = PotentialField.gaussian(1.0, 0.2, (0.1, 0.05, -0.05), support_radius=0.6, spacing=0.025)
    A, B = _unit(rng.standard_normal((2000, 3))), _unit(rng.standard_normal((2000, 3)))
    flat = MetricSpec.euclidean()
    za, zb = _unit(rng.standard_normal((20, 3))), _unit(rng.standard_normal((20, 3)))
    prm = SemiclassicalParams(0.1, 4.0)
    flat_cone = build_cone(flat, BoundaryMesh(8, 16))
    curved_cone = build_cone(curved, BoundaryMesh(4, 8))
    return {
        "bspline_eval (20k points, 2nd derivatives)": lambda: grid.evaluate(pts, 2),
        "phi_eval (20k points, exp-quadratic)": lambda: curved.log_factor(pts, 2),
        "exp_map (200 geodesics with Jacobians)": lambda: exp_map(curved, P, W, n_steps=64),
        "line_integrals_spline (2000 chords)": lambda: flat_line_integral(bump, A, B),
        "born_moments (20 pairs)": lambda: born_pairs(flat, za, zb, za, prm, bump, BornQuadrature()),
        "ray_matrix_chords (8x16 mesh, 32^3 grid)": lambda: RayTransform(flat_cone, InteriorGrid(32)),
        "ray_matrix_nodes (4x8 curved mesh, 16^3 grid)": lambda: RayTransform(curved_cone,
                                                                              InteriorGrid(16)),
    }


def _time(func, repeat: int) -> float:
    func()
    return min(timeit.repeat(func, number=1, repeat=repeat))


def main(argv=None) -> list[dict]:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--json", help="write results to this file")
    args = parser.parse_args(argv)
    try:
        from hfcalderon import _core
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rows = []
    print(f"{'kernel':50s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s}")
    saved = _backend.kernels
    try:
        for name, func in cases().items():
            _backend.kernels = _core
            fast = _time(func, args.repeat)
            _backend.kernels = _fallback
            slow = _time(func, args.repeat)
            rows.append({"kernel": name, "compiled_s": fast, "python_s": slow, "speedup": slow / fast})
            print(f"{name:50s} {fast:11.4f} {slow:10.4f} {slow / fast:8.1f}", flush=True)
    finally:
        _backend.kernels = saved
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
