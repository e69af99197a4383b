"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback
is used.  Set ``HFCALDERON_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

NAMES = (
    "bspline_eval",
    "phi_eval",
    "exp_map",
    "born_moments",
    "line_integrals_spline",
    "ray_matrix_chords",
    "ray_matrix_nodes",
)


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("HFCALDERON_BACKEND", "").lower() == "python":
        return _fallback, "python"
    try:
        from . import _core
    except ImportError:
        return _fallback, "python"
    return _core, "compiled"


kernels, BACKEND = _load()


def get(name: str, backend: str | None = None):
    """Return kernel ``name`` from the active backend, or from ``backend`` if given."""
    if backend is None:
        return getattr(kernels, name)
    if backend == "python":
        return getattr(_fallback, name)
    from . import _core

    return getattr(_core, name)
