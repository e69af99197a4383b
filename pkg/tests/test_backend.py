import numpy as np
import pytest

from hfcalderon import _backend, _fallback
from hfcalderon.boundary import BoundaryMesh
from hfcalderon.bspline import SplineGrid
from hfcalderon.geometry import MetricSpec, exp_map
from hfcalderon.hadamard import SemiclassicalParams, flat_line_integral
from hfcalderon.potential import PotentialField
from hfcalderon.scatter import BornQuadrature, born_pairs
from hfcalderon.xray import InteriorGrid, RayTransform, build_cone

from .conftest import unit

_core = pytest.importorskip("hfcalderon._core")


def both(monkeypatch, compute):
    """Evaluate ``compute`` with the compiled kernels and then with the numpy fallback."""
    monkeypatch.setattr(_backend, "kernels", _core)
    fast = compute()
    monkeypatch.setattr(_backend, "kernels", _fallback)
    slow = compute()
    return fast, slow


@pytest.fixture(scope="module")
def points():
    return np.random.default_rng(5).uniform(-0.8, 0.8, (200, 3))


@pytest.fixture(scope="module")
def gaussian_w():
    return PotentialField.gaussian(amplitude=1.0, width=0.2, center=(0.1, 0.05, -0.05),
                                   support_radius=0.6, spacing=0.05)


def test_backend_exports_every_kernel():
    for name in _backend.NAMES:
        assert callable(getattr(_core, name)) and callable(getattr(_fallback, name))
        assert _backend.get(name, "python") is getattr(_fallback, name)
        assert _backend.get(name, "compiled") is getattr(_core, name)


@pytest.mark.parametrize("order", [1, 3, 5])
def test_spline_evaluation_parity(monkeypatch, points, order):
    ax = np.arange(16.0)
    samples = np.cos(np.add.outer(np.add.outer(ax, 0.5 * ax), -0.7 * ax) / 4)
    grid = SplineGrid.from_samples(samples, (-0.8, -0.8, -0.8), 0.1, order)
    nderiv = 2 if order > 1 else 1
    fast, slow = both(monkeypatch, lambda: grid.evaluate(points, nderiv))
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("spec", [
    MetricSpec.exp_quadratic(0.1),
    MetricSpec.gaussian_bump(0.1, 1.0),
    MetricSpec.hyperbolic(),
    MetricSpec.grid_conformal(lambda p: np.exp(0.05 * np.sum(p**2, axis=1)), spacing=0.1),
], ids=lambda s: s.kind)
def test_conformal_factor_parity(monkeypatch, points, spec):
    fast, slow = both(monkeypatch, lambda: spec.log_factor(points, 2))
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("spec", [
    MetricSpec.exp_quadratic(0.1),
    MetricSpec.grid_conformal(lambda p: np.exp(0.05 * np.sum(p**2, axis=1)), spacing=0.1),
], ids=lambda s: s.kind)
def test_exponential_map_parity(monkeypatch, spec):
    P = np.tile(unit([0.2, -0.3, 0.9]), (5, 1))
    W = -np.random.default_rng(6).uniform(0.2, 0.6, (5, 3))

    def compute():
        res = exp_map(spec, P, W, n_steps=40, record=True)
        return np.concatenate([res.X.ravel(), res.U.ravel(), res.DX.ravel(), res.DU.ravel(),
                               res.path.ravel(), res.path_jac.ravel()])

    fast, slow = both(monkeypatch, compute)
    assert np.allclose(fast, slow, rtol=1e-11, atol=1e-12)


def test_line_integral_parity(monkeypatch, gaussian_w):
    rng = np.random.default_rng(7)
    A = rng.standard_normal((50, 3)); A /= np.linalg.norm(A, axis=1)[:, None]
    B = rng.standard_normal((50, 3)); B /= np.linalg.norm(B, axis=1)[:, None]
    fast, slow = both(monkeypatch, lambda: flat_line_integral(gaussian_w, A, B))
    assert np.abs(fast).max() > 0
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-14)


def test_born_moment_parity(monkeypatch, gaussian_w):
    spec = MetricSpec.euclidean()
    z = np.array([unit([0.8, 0.5, -0.3]), unit([0.0, 0.0, 1.0])])
    zpp = np.array([unit([-0.7, -0.4, 0.6]), unit([0.1, 0.2, -1.0])])
    quad = BornQuadrature(n_cheb=24, n_x=16, n_phi=16, panel_nodes=16)
    prm = SemiclassicalParams(0.2, 2.0)
    fast, slow = both(monkeypatch, lambda: np.concatenate(born_pairs(spec, z, zpp, z, prm, gaussian_w, quad)))
    assert np.allclose(fast, slow, rtol=1e-11, atol=1e-14)


@pytest.mark.parametrize("spec", [MetricSpec.euclidean(), MetricSpec.exp_quadratic(0.1)],
                         ids=lambda s: s.kind)
def test_ray_matrix_parity(monkeypatch, spec):
    cone = build_cone(spec, BoundaryMesh(4, 8))
    fast, slow = both(monkeypatch, lambda: RayTransform(cone, InteriorGrid(10)).matrix)
    assert fast.shape == slow.shape and fast.nnz > 0
    assert abs(fast - slow).max() <= 1e-12 * abs(fast).max()
