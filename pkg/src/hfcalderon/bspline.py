"""Tensor-product B-spline fields on regular 3D grids."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from . import _backend


@dataclass(frozen=True)
class SplineGrid:
    """Interpolating spline of odd order on a uniform grid.

    ``coef`` holds prefiltered coefficients; grid node ``(i, j, k)`` sits at
    ``origin + spacing * (i, j, k)``.  Coordinates outside the grid use mirror
    reflection, matching :func:`scipy.ndimage.map_coordinates` with
    ``mode='mirror'``.
    """

    coef: np.ndarray
    origin: np.ndarray
    spacing: float
    order: int = 3

    def __post_init__(self):
        if self.order not in (1, 3, 5):
            raise ValueError("spline order must be 1, 3 or 5")
        object.__setattr__(self, "coef", np.ascontiguousarray(self.coef, dtype=float))
        object.__setattr__(self, "origin", np.ascontiguousarray(self.origin, dtype=float))

    @classmethod
    def from_samples(cls, samples: np.ndarray, origin, spacing: float, order: int = 3) -> "SplineGrid":
        samples = np.asarray(samples, dtype=float)
        coef = samples if order == 1 else ndimage.spline_filter(samples, order=order, mode="mirror")
        return cls(coef, np.asarray(origin, dtype=float), float(spacing), order)

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], center, half_width: float,
                      spacing: float, order: int = 3) -> "SplineGrid":
        """Sample ``func`` (vectorized over an (m, 3) array) on a cube and interpolate."""
        center = np.asarray(center, dtype=float)
        n = int(np.ceil(2.0 * half_width / spacing)) + 1
        origin = center - 0.5 * (n - 1) * spacing
        axis = np.arange(n) * spacing
        pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3) + origin
        return cls.from_samples(np.asarray(func(pts), dtype=float).reshape(n, n, n), origin, spacing, order)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.coef.shape

    def node_coordinates(self) -> np.ndarray:
        axes = [self.origin[a] + self.spacing * np.arange(self.shape[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def evaluate(self, pts, nderiv: int = 0) -> np.ndarray:
        """Value, gradient and Hessian at points.

        Returns an (m, 10) array with columns f, fx, fy, fz, fxx, fxy, fxz,
        fyy, fyz, fzz (unused columns zero when ``nderiv`` is smaller).
        """
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
        return _backend.kernels.bspline_eval(self.coef, self.origin, self.spacing, self.order,
                                             pts, nderiv)

    def __call__(self, pts) -> np.ndarray:
        return self.evaluate(pts, 0)[:, 0]
