"""Complex kernel samples on boundary-pair grids, with binary + JSON persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError


@dataclass
class KernelGrid:
    """Samples ``values[i, j] = F(z_i, z'_j)``; entries inside the diagonal band are NaN.

    ``meta`` carries the grid description, ``h``, ``sigma`` and the band width.
    """

    values: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.rows = np.asarray(self.rows, dtype=float)
        self.cols = np.asarray(self.cols, dtype=float)
        if self.values.shape != (self.rows.shape[0], self.cols.shape[0]):
            raise DomainError("kernel shape does not match the boundary grids")

    @property
    def mask(self) -> np.ndarray:
        """True where a sample exists (outside the band)."""
        return np.isfinite(self.values)

    def filled(self, value: complex = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, value)

    def __mul__(self, scalar):
        return KernelGrid(self.values * scalar, self.rows, self.cols, dict(self.meta))

    __rmul__ = __mul__

    def save(self, path) -> list[Path]:
        """Write ``<path>.bin`` (little-endian float64 interleaved re, im) and ``<path>.json``."""
        path = Path(path)
        data = np.empty(self.values.shape + (2,), dtype="<f8")
        data[..., 0] = self.values.real
        data[..., 1] = self.values.imag
        bin_path = path.with_suffix(".bin")
        json_path = path.with_suffix(".json")
        bin_path.write_bytes(data.tobytes())
        desc = {
            "shape": list(self.values.shape),
            "dtype": "complex128 as interleaved little-endian float64",
            "rows": self.rows.tolist(),
            "cols": self.cols.tolist(),
            "meta": _jsonable(self.meta),
        }
        json_path.write_text(json.dumps(desc, indent=1, sort_keys=True))
        return [bin_path, json_path]

    @classmethod
    def load(cls, path) -> "KernelGrid":
        path = Path(path)
        desc = json.loads(path.with_suffix(".json").read_text())
        raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        shape = tuple(desc["shape"])
        raw = raw.reshape(shape + (2,))
        vals = raw[..., 0] + 1j * raw[..., 1]
        return cls(vals, np.asarray(desc["rows"]), np.asarray(desc["cols"]), desc.get("meta", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj
