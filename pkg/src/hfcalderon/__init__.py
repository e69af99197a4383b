"""High-frequency boundary data, ray transforms and potential reconstruction in 3D."""
from ._backend import BACKEND
from .boundary import BoundaryMesh
from .dtn_factor import CollarMetric, dtn_kernel, factor_symbols, heat_apply, symbol_table
from .errors import (BandError, ConfigError, DomainError, HFCalError, MemoryBudgetError, NumericalError,
                     ResolutionError, SolverError)
from .geometry import MetricSpec, connect, exp_map, solve_exp
from .hadamard import SemiclassicalParams, kernel_grid, pde_residual
from .harness import Scenario, load_scenario, parse_scenario, run
from .potential import PotentialField
from .reconstruct import reconstruct_potential, sweep_h
from .scatter import BornQuadrature, born_kernel, stationary_leading, stationary_phase_expand
from .xray import InteriorGrid, RayTransform, build_cone, forward

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BandError", "BornQuadrature", "BoundaryMesh", "CollarMetric", "ConfigError",
    "DomainError", "HFCalError", "InteriorGrid", "MemoryBudgetError", "MetricSpec", "NumericalError",
    "PotentialField", "RayTransform", "ResolutionError", "Scenario", "SemiclassicalParams",
    "SolverError", "born_kernel", "build_cone", "connect", "dtn_kernel", "exp_map", "factor_symbols",
    "forward", "heat_apply", "kernel_grid", "load_scenario", "parse_scenario", "pde_residual",
    "reconstruct_potential", "run", "solve_exp", "stationary_leading", "stationary_phase_expand",
    "sweep_h", "symbol_table",
]
