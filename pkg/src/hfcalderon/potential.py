"""Compactly supported potentials sampled on regular grids."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .bspline import SplineGrid
from .errors import DomainError


def bump_cutoff(t: np.ndarray) -> np.ndarray:
    """C-infinity bump ``exp(1 - 1 / (1 - t^2))`` on ``|t| < 1``, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


def flat_top_cutoff(t: np.ndarray, plateau: float) -> np.ndarray:
    """Smooth step equal to 1 for ``t <= plateau`` and 0 for ``t >= 1``."""
    t = np.asarray(t, dtype=float)
    u = np.clip((t - plateau) / (1.0 - plateau), 0.0, 1.0)

    def f(x):
        return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)

    a, b = f(1.0 - u), f(u)
    return a / (a + b)


@dataclass(frozen=True)
class PotentialField:
    """Smooth potential supported in the ball ``(support_center, support_radius)``.

    Values come from a spline fit of grid samples; evaluation returns exactly
    zero outside the support ball.  ``grid=None`` represents the zero field.
    """

    grid: SplineGrid | None
    support_center: tuple
    support_radius: float

    @classmethod
    def zero(cls, center=(0.0, 0.0, 0.0), radius: float = 0.5) -> "PotentialField":
        return cls(None, tuple(map(float, center)), float(radius))

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], center, support_radius: float,
                      spacing: float = 0.025, order: int = 3) -> "PotentialField":
        """Sample ``func`` on a cube enclosing the support ball (with a 3-cell pad)."""
        center = np.asarray(center, dtype=float)

        def masked(pts):
            vals = np.asarray(func(pts), dtype=float)
            return np.where(np.linalg.norm(pts - center, axis=1) < support_radius, vals, 0.0)

        grid = SplineGrid.from_function(masked, center, support_radius + 3 * spacing, spacing, order)
        return cls(grid, tuple(center), float(support_radius))

    @classmethod
    def gaussian(cls, amplitude: float = 1.0, width: float = 0.5, center=(0.0, 0.0, 0.0),
                 support_radius: float = 0.75, spacing: float = 0.025, order: int = 3):
        """``amplitude * exp(-|x-c|^2 / (2 width^2))`` times a C-infinity bump of radius
        ``support_radius``."""
        c = np.asarray(center, dtype=float)

        def f(pts):
            d2 = np.sum((pts - c) ** 2, axis=1)
            return amplitude * np.exp(-d2 / (2 * width**2)) * bump_cutoff(np.sqrt(d2) / support_radius)

        return cls.from_function(f, c, support_radius, spacing, order)

    @classmethod
    def smooth_indicator(cls, radius: float = 0.3, transition: float = 0.05, center=(0.0, 0.0, 0.0),
                         spacing: float = 0.0125, order: int = 3, amplitude: float = 1.0):
        """Approximately ``amplitude`` on the ball of ``radius``, decaying to zero
        over ``transition`` on either side."""
        c = np.asarray(center, dtype=float)
        outer = radius + transition
        plateau = (radius - transition) / outer

        def f(pts):
            return amplitude * flat_top_cutoff(np.linalg.norm(pts - c, axis=1) / outer, plateau)

        return cls.from_function(f, c, outer, spacing, order)

    @property
    def is_zero(self) -> bool:
        return self.grid is None or not np.any(self.grid.coef)

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.support_center)

    def evaluate(self, pts, nderiv: int = 0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros((pts.shape[0], 10))
        if self.grid is None:
            return out
        inside = np.linalg.norm(pts - self.center_array, axis=1) < self.support_radius
        if inside.any():
            out[inside] = self.grid.evaluate(pts[inside], nderiv)
        return out

    def __call__(self, pts) -> np.ndarray:
        return self.evaluate(pts, 0)[:, 0]

    def scaled(self, factor: float) -> "PotentialField":
        if self.grid is None:
            return self
        return replace(self, grid=replace(self.grid, coef=self.grid.coef * factor))

    def _combine(self, other: "PotentialField", sign: float) -> "PotentialField":
        if other.grid is None:
            return self
        if self.grid is None:
            return other.scaled(sign)
        a, b = self.grid, other.grid
        if (a.shape != b.shape or a.order != b.order or a.spacing != b.spacing
                or not np.array_equal(a.origin, b.origin)):
            raise DomainError("potentials are sampled on different grids")
        rad = max(self.support_radius, other.support_radius)
        if not np.allclose(self.support_center, other.support_center):
            raise DomainError("potentials have different support centers")
        return PotentialField(replace(a, coef=a.coef + sign * b.coef), self.support_center, rad)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def support_margin(self, spec) -> float:
        """Lower bound on the metric distance from the support ball to the boundary."""
        cen = spec.center_array
        gap = spec.radius - np.linalg.norm(self.center_array - cen) - self.support_radius
        if gap <= 0:
            return float(gap)
        direction = self.center_array - cen
        nrm = np.linalg.norm(direction)
        direction = direction / nrm if nrm > 0 else np.array([1.0, 0.0, 0.0])
        rng = np.random.default_rng(0)
        dirs = np.vstack([direction, rng.standard_normal((31, 3))])
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        t = np.linspace(spec.radius - gap, spec.radius, 9)
        pts = cen + (dirs[:, None, :] * t[None, :, None]).reshape(-1, 3)
        return float(gap * spec.factor(pts).min())

    def sup_norm(self, n: int = 41) -> float:
        return float(np.abs(self(self._probe(n))).max()) if self.grid is not None else 0.0

    def c2_seminorm(self, n: int = 41) -> float:
        """Finite-difference estimate of the largest second derivative."""
        if self.grid is None:
            return 0.0
        pts = self._probe(n)
        step = self.grid.spacing
        f0 = self(pts)
        best = 0.0
        for a in range(3):
            e = np.zeros(3)
            e[a] = step
            d2 = (self(pts + e) - 2 * f0 + self(pts - e)) / step**2
            best = max(best, float(np.abs(d2).max()))
        return best

    def _probe(self, n: int) -> np.ndarray:
        ax = np.linspace(-1.0, 1.0, n) * self.support_radius
        pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        return pts[np.linalg.norm(pts, axis=1) < self.support_radius] + self.center_array
