"""Quadrature meshes on the boundary sphere."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundaryMesh:
    """Tensor mesh on a sphere: Gauss-Legendre in ``cos(theta)``, uniform in ``phi``.

    ``weights`` are surface-area quadrature weights (they sum to ``4 pi R^2``).
    """

    n_theta: int
    n_phi: int
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    def _rule(self):
        x, wx = np.polynomial.legendre.leggauss(self.n_theta)
        phi = 2.0 * np.pi * (np.arange(self.n_phi) + 0.5) / self.n_phi
        return x, wx, phi

    @property
    def angles(self) -> np.ndarray:
        """(size, 2) array of (theta, phi)."""
        x, _, phi = self._rule()
        th = np.arccos(x)
        return np.stack(np.meshgrid(th, phi, indexing="ij"), -1).reshape(-1, 2)

    @property
    def normals(self) -> np.ndarray:
        x, _, phi = self._rule()
        st = np.sqrt(1.0 - x**2)
        n = np.stack([st[:, None] * np.cos(phi)[None, :], st[:, None] * np.sin(phi)[None, :],
                      np.broadcast_to(x[:, None], (x.size, phi.size))], axis=-1)
        return n.reshape(-1, 3)

    @property
    def nodes(self) -> np.ndarray:
        return np.asarray(self.center) + self.radius * self.normals

    @property
    def weights(self) -> np.ndarray:
        _, wx, _ = self._rule()
        w = np.repeat(wx, self.n_phi) * (2.0 * np.pi / self.n_phi) * self.radius**2
        return w

    def neighbors(self) -> list[tuple[int, int]]:
        """Index pairs of adjacent nodes (periodic in phi), for graph differences."""
        out = []
        for i in range(self.n_theta):
            for j in range(self.n_phi):
                a = i * self.n_phi + j
                out.append((a, i * self.n_phi + (j + 1) % self.n_phi))
                if i + 1 < self.n_theta:
                    out.append((a, (i + 1) * self.n_phi + j))
        return out

    def describe(self) -> dict:
        return {"type": "gauss-sphere", "n_theta": self.n_theta, "n_phi": self.n_phi,
                "center": list(self.center), "radius": self.radius}
