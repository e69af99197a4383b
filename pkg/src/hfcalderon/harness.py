"""Scenario files, artifact persistence and pipeline orchestration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
import traceback
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomlkit
from tomlkit.exceptions import ParseError

from . import _backend
from .boundary import BoundaryMesh
from .errors import ConfigError, DomainError, HFCalError
from .geometry import KINDS, MetricSpec
from .hadamard import SemiclassicalParams, boundary_kernel_grid
from .potential import PotentialField
from .xray import InteriorGrid, RayData, RayTransform, build_cone, forward

COMMANDS = ("forward-kernel", "born", "stationary", "xray", "invert", "reconstruct", "sweep",
            "dtn", "selftest")
WORKERS_ENV = "HFCAL_WORKERS"
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# schema


@dataclass
class MetricConfig:
    """Metric of the ball; ``params`` feeds the analytic kinds in order."""

    kind: str = "euclidean"
    c: float = 1.0
    params: list = field(default_factory=list)
    band: float = 0.4
    n_steps: int = 64


@dataclass
class PotentialConfig:
    """Named analytic preset (``zero``, ``gaussian``, ``smooth-indicator``) or a grid file."""

    kind: str = "zero"
    amplitude: float = 1.0
    width: float = 0.5
    center: list = field(default_factory=lambda: [0.1, 0.05, -0.05])
    support_radius: float = 0.75
    radius: float = 0.3
    transition: float = 0.05
    spacing: float = 0.025
    path: str = ""


@dataclass
class PotentialPair:
    """The two potentials; Born data use their difference ``v - v_tilde``."""

    v: PotentialConfig = field(default_factory=lambda: PotentialConfig(kind="gaussian"))
    v_tilde: PotentialConfig = field(default_factory=PotentialConfig)


@dataclass
class ParamsConfig:
    h: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    sigma: complex = 4.0

    def __post_init__(self):
        self.sigma = complex(self.sigma)


@dataclass
class ConeConfig:
    n_theta: int = 16
    n_phi: int = 32


@dataclass
class QuadratureConfig:
    order: int = 1
    n_cheb: int = 32
    n_x: int = 24
    n_phi: int = 32
    panel_nodes: int = 8
    points_per_wavelength: float = 6.0
    memory_budget: float = 1.5e9


@dataclass
class InversionConfig:
    alpha: float = 1e-4
    maxiter: int = 200
    tol: float = 1e-8
    grid_n: int = 48
    support_radius: float = 0.9
    source: str = "born"
    noise: float = 0.0
    data: str = ""


@dataclass
class DtnConfig:
    collar: str = "flat"
    modulation: float = 0.0
    order: int = 1
    n: int = 512
    band: float = 0.1
    window: float = 0.1
    t_max: float = 0.5
    n_t: int = 51
    n_xi: int = 101
    xi_max: float = 5.0


@dataclass
class OutputConfig:
    directory: str = "hfcal-out"


@dataclass
class Scenario:
    """Complete, validated description of one run."""

    name: str = "flat"
    seed: int = 0
    metric: MetricConfig = field(default_factory=MetricConfig)
    potential: PotentialPair = field(default_factory=PotentialPair)
    params: ParamsConfig = field(default_factory=ParamsConfig)
    cone: ConeConfig = field(default_factory=ConeConfig)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    dtn: DtnConfig = field(default_factory=DtnConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = field(default=".", compare=False, repr=False)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        sigma = complex(self.params.sigma)
        out["params"]["sigma"] = sigma.real if sigma.imag == 0 else {"re": sigma.real, "im": sigma.imag}
        return out

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> "Scenario":
        _validate(self)
        return self


def _plain(value):
    """tomlkit items to plain python values."""
    if hasattr(value, "unwrap"):
        return value.unwrap()
    return value


def _build(cls, table: dict, where: str, unknown: list, problems: list):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    for key, raw in table.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            unknown.append(path)
            continue
        default = names[key].default
        if default is dataclasses.MISSING:
            default = names[key].default_factory()
        if dataclasses.is_dataclass(default):
            if not isinstance(raw, dict):
                problems.append(f"{path} must be a table")
                continue
            kwargs[key] = _build(type(default), raw, path, unknown, problems)
            continue
        value = _coerce(key, raw, default, path, problems)
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)


def _coerce(key, raw, default, path, problems):
    if key == "sigma":
        if isinstance(raw, dict):
            if set(raw) - {"re", "im"}:
                problems.append(f"{path} table takes only 're' and 'im'")
                return None
            try:
                return complex(float(raw.get("re", 0.0)), float(raw.get("im", 0.0)))
            except (TypeError, ValueError):
                problems.append(f"{path} components must be numbers")
                return None
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return complex(raw)
        problems.append(f"{path} must be a number or a table {{re, im}}")
        return None
    if isinstance(default, bool) or isinstance(raw, bool):
        if isinstance(default, bool) and isinstance(raw, bool):
            return raw
        problems.append(f"{path} has the wrong type")
        return None
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, int):
            return raw
        problems.append(f"{path} must be an integer")
        return None
    if isinstance(default, float):
        if isinstance(raw, (int, float)):
            return float(raw)
        problems.append(f"{path} must be a number")
        return None
    if isinstance(default, str):
        if isinstance(raw, str):
            return raw
        problems.append(f"{path} must be a string")
        return None
    if isinstance(default, list):
        if isinstance(raw, (int, float)) and key == "h":
            return [float(raw)]
        if isinstance(raw, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                         for v in raw):
            return [float(v) for v in raw]
        problems.append(f"{path} must be a list of numbers")
        return None
    return raw


def _validate(s: Scenario) -> None:
    problems = []
    if not s.params.h:
        problems.append("params.h: at least one value is required")
    for h in s.params.h:
        if not (0.0 < h <= 1.0):
            problems.append(f"params.h: value {h} outside (0, 1]")
    sigma = complex(s.params.sigma)
    if sigma == 0:
        problems.append("params.sigma: must be nonzero")
    if sigma.imag > 0:
        problems.append("params.sigma: Im sigma must be <= 0 (decaying resolvent branch)")
    if s.metric.kind not in KINDS:
        problems.append(f"metric.kind: unknown kind {s.metric.kind!r}; expected one of "
                        f"{sorted(k for k in KINDS if k != 'grid-conformal')}")
    if s.metric.kind == "grid-conformal":
        problems.append("metric.kind: grid-conformal metrics are built in code, not from scenarios")
    needed = {"hyperbolic": 2, "gaussian-bump": 2, "exp-quadratic": 1}.get(s.metric.kind, 0)
    if len(s.metric.params) != needed:
        problems.append(f"metric.params: {s.metric.kind} takes {needed} parameter(s)")
    if s.metric.c <= 0:
        problems.append("metric.c: must be positive")
    for name, pc in (("v", s.potential.v), ("v_tilde", s.potential.v_tilde)):
        where = f"potential.{name}"
        if pc.kind not in ("zero", "gaussian", "smooth-indicator", "file"):
            problems.append(f"{where}.kind: unknown preset {pc.kind!r}")
        if len(pc.center) != 3:
            problems.append(f"{where}.center: needs three coordinates")
        if pc.kind == "file":
            if not pc.path:
                problems.append(f"{where}.path: required for kind 'file'")
            elif not s.resolve(pc.path).with_suffix(".json").exists():
                problems.append(f"{where}.path: file {pc.path!r} not found")
    if s.inversion.data and not s.resolve(s.inversion.data).exists():
        problems.append(f"inversion.data: file {s.inversion.data!r} not found")
    if s.inversion.source not in ("born", "stationary"):
        problems.append("inversion.source: must be 'born' or 'stationary'")
    if s.quadrature.order not in (1, 2):
        problems.append("quadrature.order: must be 1 or 2")
    if s.dtn.collar not in ("flat", "expanding"):
        problems.append("dtn.collar: must be 'flat' or 'expanding'")
    if s.cone.n_theta < 4 or s.cone.n_phi < 8:
        problems.append("cone: needs n_theta >= 4 and n_phi >= 8")
    if problems:
        raise ConfigError("invalid scenario: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# loading and saving


def parse_scenario(text: str, strict: bool = True, base_dir=".") -> Scenario:
    """Scenario from TOML text; see :func:`load_scenario`."""
    try:
        doc = tomlkit.parse(text)
    except ParseError as exc:
        raise ConfigError(f"parse error at line {exc.line}, column {exc.col}: {exc}") from None
    unknown: list[str] = []
    problems: list[str] = []
    scen = _build(Scenario, _plain(doc), "", unknown, problems)
    if problems:
        raise ConfigError("invalid scenario: " + "; ".join(problems))
    if unknown:
        msg = "unknown scenario keys: " + ", ".join(unknown)
        if strict:
            raise ConfigError(msg)
        warnings.warn(msg, UserWarning, stacklevel=3)
    scen.base_dir = str(base_dir)
    return scen.validate()


def load_scenario(path, strict: bool = True) -> Scenario:
    """Read and validate a TOML scenario; missing keys take their defaults.

    Unknown keys raise :class:`ConfigError` when ``strict``, otherwise they
    are reported with a warning and ignored.  Relative file references are
    resolved against the scenario's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario(text, strict, path.parent)


def dump_scenario(s: Scenario) -> str:
    doc = tomlkit.document()
    for key, value in s.to_dict().items():
        doc[key] = value
    return tomlkit.dumps(doc)


def save_scenario(s: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(dump_scenario(s))
    return path


PRESETS = {
    "flat": {},
    "conformal": {"metric": {"kind": "constant-conformal", "c": 1.5}},
    "curved": {"metric": {"kind": "gaussian-bump", "params": [-0.2, 0.4]},
               "cone": {"n_theta": 8, "n_phi": 16}, "params": {"h": [0.2, 0.1], "sigma": 1.0}},
    "hyperbolic": {"metric": {"kind": "hyperbolic", "params": [0.5, 2.0]},
                   "cone": {"n_theta": 8, "n_phi": 16}, "params": {"h": [0.2, 0.1], "sigma": 1.0}},
}


def preset(name: str) -> Scenario:
    """Built-in scenario by name (``flat``, ``conformal``, ``curved``, ``hyperbolic``)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    doc = tomlkit.document()
    doc["name"] = name
    for key, value in PRESETS[name].items():
        doc[key] = value
    return parse_scenario(tomlkit.dumps(doc))


# ---------------------------------------------------------------------------
# building pipeline objects


def build_metric(s: Scenario) -> MetricSpec:
    m = s.metric
    kw = {"band": m.band, "n_steps": m.n_steps}
    if m.kind == "euclidean":
        return MetricSpec.euclidean(**kw)
    if m.kind == "constant-conformal":
        return MetricSpec.constant_conformal(m.c, **kw)
    if m.kind == "hyperbolic":
        return MetricSpec.hyperbolic(*m.params, **kw)
    if m.kind == "gaussian-bump":
        return MetricSpec.gaussian_bump(*m.params, **kw)
    return MetricSpec.exp_quadratic(*m.params, **kw)


def save_potential_grid(samples: np.ndarray, origin, spacing: float, support_center,
                        support_radius: float, path, order: int = 3) -> list[Path]:
    """Write node samples as ``<path>.bin`` (little-endian float64, C order) with a JSON sidecar."""
    path = Path(path)
    samples = np.asarray(samples, dtype="<f8")
    path.with_suffix(".bin").write_bytes(samples.tobytes())
    path.with_suffix(".json").write_text(json.dumps({
        "shape": list(samples.shape), "origin": [float(v) for v in origin],
        "spacing": float(spacing), "order": int(order),
        "support_center": [float(v) for v in support_center],
        "support_radius": float(support_radius)}, indent=1))
    return [path.with_suffix(".bin"), path.with_suffix(".json")]


def load_potential_grid(path) -> PotentialField:
    from .bspline import SplineGrid
    path = Path(path)
    desc = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    shape = tuple(desc["shape"])
    if raw.size != int(np.prod(shape)):
        raise ConfigError(f"potential file {path} does not match its declared shape {shape}")
    grid = SplineGrid.from_samples(raw.reshape(shape), desc["origin"], desc["spacing"],
                                   desc.get("order", 3))
    return PotentialField(grid, tuple(desc["support_center"]), float(desc["support_radius"]))


def build_potential(pc: PotentialConfig, s: Scenario) -> PotentialField:
    if pc.kind == "zero":
        return PotentialField.zero(pc.center, pc.support_radius)
    if pc.kind == "gaussian":
        return PotentialField.gaussian(pc.amplitude, pc.width, pc.center, pc.support_radius,
                                       spacing=pc.spacing)
    if pc.kind == "smooth-indicator":
        return PotentialField.smooth_indicator(pc.radius, pc.transition, pc.center,
                                               spacing=pc.spacing, amplitude=pc.amplitude)
    return load_potential_grid(s.resolve(pc.path))


def build_difference(s: Scenario) -> PotentialField:
    return build_potential(s.potential.v, s) - build_potential(s.potential.v_tilde, s)


def build_quadrature(s: Scenario):
    from .scatter import BornQuadrature
    q = s.quadrature
    return BornQuadrature(n_cheb=q.n_cheb, n_x=q.n_x, n_phi=q.n_phi, panel_nodes=q.panel_nodes,
                          points_per_wavelength=q.points_per_wavelength,
                          memory_budget=q.memory_budget)


def build_mesh(s: Scenario, spec: MetricSpec) -> BoundaryMesh:
    return BoundaryMesh(s.cone.n_theta, s.cone.n_phi, spec.center, spec.radius)


def build_params(s: Scenario) -> list[SemiclassicalParams]:
    return [SemiclassicalParams(h, s.params.sigma) for h in s.params.h]


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# running


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _h_tag(h: float) -> str:
    """File-name tag for ``h`` without dots, e.g. ``h0p05``."""
    return "h" + f"{h:g}".replace(".", "p")


@dataclass
class RunResult:
    """Exit status, output directory and the manifest written there."""

    status: int
    out_dir: Path
    manifest: dict

    @property
    def files(self) -> list[str]:
        return [f["path"] for f in self.manifest["files"]]


class _Run:
    def __init__(self, scenario: Scenario, out_dir: Path, workers: int):
        self.s, self.out, self.workers = scenario, out_dir, workers
        self.timings: dict[str, float] = {}
        self.summary: dict[str, Any] = {}
        self.current: str | None = None

    @contextmanager
    def stage(self, name: str):
        self.current = name
        t0 = time.perf_counter()
        yield
        self.timings[name] = round(time.perf_counter() - t0, 6)
        self.current = None

    def map(self, func, items):
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return [func(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(func, items))

    def path(self, name: str) -> Path:
        return self.out / name


def _cmd_forward_kernel(run: _Run):
    s = run.s
    with run.stage("setup"):
        spec = build_metric(s)
        mesh = build_mesh(s, spec)
        V = build_potential(s.potential.v, s)
    with run.stage("kernels"):
        grids = run.map(lambda p: boundary_kernel_grid(spec, mesh, p, None if V.is_zero else V),
                        build_params(s))
    with run.stage("write"):
        for p, kg in zip(build_params(s), grids):
            kg.save(run.path(f"forward_kernel_{_h_tag(p.h)}"))
    run.summary["pairs"] = int(np.isfinite(grids[0].values).sum())


def _cone_setup(run: _Run):
    s = run.s
    with run.stage("cone"):
        spec = build_metric(s)
        cone = build_cone(spec, build_mesh(s, spec))
    run.summary["n_pairs"] = int(cone.n_pairs)
    return spec, cone


def _cmd_born(run: _Run):
    from .scatter import BornSynthesizer
    spec, cone = _cone_setup(run)
    with run.stage("moments"):
        synth = BornSynthesizer(spec, cone, build_difference(run.s), build_quadrature(run.s))
        if spec.is_flat:
            synth.moments
    with run.stage("kernels"):
        kernels = run.map(lambda p: synth.kernel(p, run.s.quadrature.order), build_params(run.s))
    with run.stage("write"):
        for p, bk in zip(build_params(run.s), kernels):
            bk.save(run.path(f"born_{_h_tag(p.h)}"))


def _cmd_stationary(run: _Run):
    from .scatter import kernel_from_ray_data, stationary_weight
    spec, cone = _cone_setup(run)
    with run.stage("ray-data"):
        xw = forward(cone, build_difference(run.s), stationary_weight(spec, cone)).values
    with run.stage("kernels"):
        kernels = [kernel_from_ray_data(cone, p, xw) for p in build_params(run.s)]
    with run.stage("write"):
        for p, bk in zip(build_params(run.s), kernels):
            bk.save(run.path(f"stationary_{_h_tag(p.h)}"))


def _synthetic_ray_data(run: _Run, spec, cone, weight) -> RayData:
    data = forward(cone, build_difference(run.s), weight)
    noise = run.s.inversion.noise
    if noise > 0:
        rng = np.random.default_rng(run.s.seed)
        scale = noise * np.sqrt(np.mean(np.abs(data.values) ** 2))
        data = RayData(data.values + scale * rng.standard_normal(data.values.shape), data.pairs)
    return data


def _cmd_xray(run: _Run):
    from .scatter import stationary_weight
    spec, cone = _cone_setup(run)
    with run.stage("forward"):
        data = _synthetic_ray_data(run, spec, cone, stationary_weight(spec, cone))
    with run.stage("write"):
        data.save_csv(run.path("raydata.csv"))
        data.save_binary(run.path("raydata"))
    run.summary["max_abs"] = float(np.abs(data.values).max())


def _transform(run: _Run, spec, cone):
    from .scatter import stationary_weight
    inv = run.s.inversion
    return RayTransform(cone, grid=InteriorGrid(inv.grid_n, spec.center, spec.radius),
                        support=(spec.center, inv.support_radius * spec.radius),
                        weight=stationary_weight(spec, cone))


def _write_field(path: Path, field_grid: np.ndarray, grid: InteriorGrid, extra: dict) -> None:
    inter = np.empty(field_grid.shape + (2,), dtype="<f8")
    inter[..., 0], inter[..., 1] = field_grid.real, np.imag(field_grid)
    path.with_suffix(".bin").write_bytes(inter.tobytes())
    path.with_suffix(".json").write_text(json.dumps({
        "shape": list(field_grid.shape),
        "dtype": "complex as interleaved little-endian float64 (re, im), C order (x, y, z)",
        "grid": {"n": grid.n, "center": list(grid.center), "half_width": grid.half_width},
        **extra}, indent=1, sort_keys=True))


def _load_ray_data(path: Path) -> RayData:
    if path.suffix == ".csv":
        return RayData.load_csv(path)
    return RayData.load_binary(path)


def _cmd_invert(run: _Run):
    from .reconstruct import relative_l2
    from .scatter import stationary_weight
    spec, cone = _cone_setup(run)
    inv = run.s.inversion
    with run.stage("data"):
        if inv.data:
            data = _load_ray_data(run.s.resolve(inv.data))
            if data.pairs.shape != cone.pairs.shape or not np.array_equal(data.pairs, cone.pairs):
                raise DomainError("ray data pairs do not match the scenario cone")
        else:
            data = _synthetic_ray_data(run, spec, cone, stationary_weight(spec, cone))
    with run.stage("operator"):
        op = _transform(run, spec, cone)
    with run.stage("invert"):
        f, diag = op.invert(data.values, alpha=inv.alpha, maxiter=inv.maxiter, tol=inv.tol)
    truth = op.sample(build_difference(run.s))
    err = relative_l2(f, truth)
    with run.stage("write"):
        _write_field(run.path("inversion_field"), op.to_grid(f), op.grid,
                     {"relative_error": err, "iters": diag["iters"],
                      "converged": diag["converged"], "discrepancy": diag["discrepancy"]})
        run.path("inversion_residuals.csv").write_text(
            "iteration,relative_residual\n"
            + "".join(f"{i},{r!r}\n" for i, r in enumerate(map(float, diag["residuals"]))))
    run.summary.update({"relative_error": err, "iters": diag["iters"],
                        "converged": diag["converged"]})


def _cmd_reconstruct(run: _Run):
    from .reconstruct import reconstruct_potential
    from .scatter import BornSynthesizer
    spec, cone = _cone_setup(run)
    W = build_difference(run.s)
    inv = run.s.inversion
    with run.stage("operator"):
        op = _transform(run, spec, cone)
    with run.stage("moments"):
        synth = BornSynthesizer(spec, cone, W, build_quadrature(run.s))
        if spec.is_flat:
            synth.moments
    errors = {}
    for p in build_params(run.s):
        tag = _h_tag(p.h)
        with run.stage(f"kernel-{tag}"):
            kern = synth.kernel(p, run.s.quadrature.order)
        with run.stage(f"invert-{tag}"):
            res = reconstruct_potential(kern, cone, p, inv.alpha, inv.maxiter, inv.tol,
                                        transform=op, truth=W)
        res.save(run.out, f"reconstruction_{tag}")
        errors[tag] = res.error
    run.summary["relative_error"] = errors


def _cmd_sweep(run: _Run):
    from .reconstruct import sweep_h
    spec, cone = _cone_setup(run)
    inv = run.s.inversion
    with run.stage("sweep"):
        table = sweep_h(spec, cone, build_difference(run.s), run.s.params.h, run.s.params.sigma,
                        source=inv.source, alpha=inv.alpha, maxiter=inv.maxiter, tol=inv.tol,
                        quad=build_quadrature(run.s),
                        grid=InteriorGrid(inv.grid_n, spec.center, spec.radius),
                        support=(spec.center, inv.support_radius * spec.radius))
    with run.stage("write"):
        table.save_csv(run.path("convergence.csv"))
    run.summary.update({"slope": table.slope, "source": table.source,
                        "errors": [r["error"] for r in table.rows]})


def _cmd_dtn(run: _Run):
    from . import dtn_factor as dtn
    d = run.s.dtn
    with run.stage("symbols"):
        collar = (dtn.CollarMetric.flat() if d.collar == "flat"
                  else dtn.CollarMetric.expanding(d.modulation))
        fs = dtn.factor_symbols(collar, d.order)
    t = np.linspace(0.0, d.t_max, d.n_t)
    x = 2 * np.pi * np.arange(16) / 16
    xi = np.linspace(-d.xi_max, d.xi_max, d.n_xi)
    sups = {}
    for h in run.s.params.h:
        tag = _h_tag(h)
        with run.stage(f"heat-{tag}"):
            st = dtn.heat_symbols(dtn.SymbolTable(fs, t, x, xi), h)
            st.save(run.path(f"symbols_{tag}"))
        with run.stage(f"kernel-{tag}"):
            kg = dtn.dtn_kernel(fs, h, d.n, band=d.band, window=d.window)
            kg.save(run.path(f"dtn_kernel_{tag}"))
        sups[tag] = float(np.nanmax(np.abs(kg.values)))
    run.summary["kernel_sup"] = sups


def _cmd_selftest(run: _Run, only=None):
    from .acceptance import run_suite
    with run.stage("suite"):
        results = run_suite(only)
    report = [r.as_dict() for r in results]
    run.path("selftest.json").write_text(json.dumps(report, indent=1))
    run.summary["criteria"] = {r.key: r.passed for r in results}
    failed = [r.key for r in results if not r.passed]
    if failed:
        run.current = "suite"
        raise HFCalError(f"acceptance criteria failed: {', '.join(failed)}")


_HANDLERS = {"forward-kernel": _cmd_forward_kernel, "born": _cmd_born,
             "stationary": _cmd_stationary, "xray": _cmd_xray, "invert": _cmd_invert,
             "reconstruct": _cmd_reconstruct, "sweep": _cmd_sweep, "dtn": _cmd_dtn,
             "selftest": _cmd_selftest}


def run(command: str, scenario: Scenario, out_dir=None, workers: int | None = None,
        only=None) -> RunResult:
    """Execute one pipeline and write its artifacts plus ``manifest.json``.

    Returns status 0 on success and 1 when a stage fails; the manifest then
    names the failed stage and the error.  ``only`` restricts ``selftest`` to
    the listed criteria.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    out = Path(out_dir if out_dir is not None else scenario.resolve(scenario.output.directory))
    out.mkdir(parents=True, exist_ok=True)
    workers = default_workers() if workers is None else max(1, int(workers))
    job = _Run(scenario, out, workers)
    save_scenario(scenario, out / "scenario.toml")
    status, error = 0, None
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if command == "selftest":
                _cmd_selftest(job, only)
            else:
                _HANDLERS[command](job)
        job.summary["warnings"] = sorted({str(w.message) for w in caught})
    except (HFCalError, ArithmeticError, MemoryError, ValueError) as exc:
        status = 1
        error = {"type": type(exc).__name__, "message": str(exc),
                 "traceback": traceback.format_exc(limit=4)}
    manifest = {
        "command": command,
        "status": "ok" if status == 0 else "failed",
        "failed_stage": job.current if status else None,
        "error": error,
        "inputs_digest": _inputs_digest(scenario),
        "scenario": scenario.to_dict(),
        "settings": {"workers": workers, "backend": _backend.BACKEND},
        "timings": {**job.timings, "total": round(time.perf_counter() - t0, 6)},
        "summary": _jsonable(job.summary),
        "files": [{"path": str(p.relative_to(out)), "sha256": sha256_file(p),
                   "bytes": p.stat().st_size}
                  for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST_NAME],
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return RunResult(status, out, manifest)


def _inputs_digest(s: Scenario) -> str:
    digest = hashlib.sha256(dump_scenario(s).encode())
    for ref in (s.potential.v.path if s.potential.v.kind == "file" else "",
                s.potential.v_tilde.path if s.potential.v_tilde.kind == "file" else "",
                s.inversion.data):
        if ref:
            base = s.resolve(ref)
            for p in sorted({base, base.with_suffix(".bin"), base.with_suffix(".json")}):
                if p.is_file():
                    digest.update(sha256_file(p).encode())
    return digest.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
