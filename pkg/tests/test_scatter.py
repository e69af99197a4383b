import cmath
import math

import numpy as np
import pytest
import sympy
from scipy.integrate import quad

from hfcalderon.boundary import BoundaryMesh
from hfcalderon.errors import DomainError, MemoryBudgetError, ResolutionError
from hfcalderon.geometry import MetricSpec
from hfcalderon.hadamard import SemiclassicalParams
from hfcalderon.kernelgrid import KernelGrid
from hfcalderon.potential import PotentialField
from hfcalderon.scatter import (STATIONARY_CONSTANT, BornQuadrature, BornSynthesizer, born_kernel,
                                born_pairs, greens_rhs, stationary_leading, stationary_phase_expand)
from hfcalderon.xray import build_cone

from .conftest import unit

FLAT = MetricSpec.euclidean()


@pytest.fixture(scope="module")
def small_cone():
    return build_cone(FLAT, BoundaryMesh(4, 8))


@pytest.fixture(scope="module")
def gaussian_w():
    return PotentialField.gaussian(amplitude=1.0, width=0.2, center=(0.1, 0.05, -0.05),
                                   support_radius=0.6, spacing=0.025)


@pytest.fixture(scope="module")
def synth(small_cone, gaussian_w):
    return BornSynthesizer(FLAT, small_cone, gaussian_w)


def _pairs(kernel, cone):
    return kernel.pair_values(cone)


# first Born kernel


def test_born_kernel_of_zero_potential(small_cone):
    k = born_kernel(FLAT, small_cone, SemiclassicalParams(0.1, 4.0), PotentialField.zero())
    F, D = _pairs(k, small_cone)
    assert np.all(F == 0) and np.all(D == 0)


def test_born_kernel_scales_like_inverse_h(synth, small_cone):
    sups = []
    for h in (0.1, 0.05):
        F, _ = _pairs(synth.kernel(SemiclassicalParams(h, 4.0)), small_cone)
        sups.append(np.abs(F).max())
    slope = math.log(sups[1] / sups[0]) / math.log(0.5)
    assert slope == pytest.approx(-1.0, abs=0.2)


def test_born_kernel_is_linear_in_the_potential(small_cone, gaussian_w):
    prm = SemiclassicalParams(0.1, 4.0)
    other = PotentialField.gaussian(amplitude=-0.5, width=0.15, center=(0.1, 0.05, -0.05),
                                    support_radius=0.6, spacing=0.025)
    a, _ = _pairs(born_kernel(FLAT, small_cone, prm, gaussian_w), small_cone)
    b, _ = _pairs(born_kernel(FLAT, small_cone, prm, other), small_cone)
    ab, _ = _pairs(born_kernel(FLAT, small_cone, prm, gaussian_w + other.scaled(2.0)), small_cone)
    assert np.abs(ab - (a + 2 * b)).max() <= 1e-12 * np.abs(a).max()


def test_born_kernel_rejects_bad_order(synth):
    with pytest.raises(DomainError):
        synth.kernel(SemiclassicalParams(0.1, 4.0), order=3)


def test_under_resolved_panels(small_cone, gaussian_w):
    with pytest.raises(ResolutionError, match="points per"):
        born_kernel(FLAT, small_cone, SemiclassicalParams(0.1, 4.0), gaussian_w,
                    quad=BornQuadrature(panel_nodes=4))


def test_second_order_memory_budget(small_cone, gaussian_w):
    with pytest.raises(MemoryBudgetError, match="memory_budget"):
        born_kernel(FLAT, small_cone, SemiclassicalParams(0.1, 4.0), gaussian_w, order=2,
                    quad=BornQuadrature(memory_budget=1e4))


def test_normal_derivative_matches_finite_differences(gaussian_w):
    prm = SemiclassicalParams(0.2, 2.0)
    quad_hi = BornQuadrature(n_cheb=64, n_x=48, n_phi=64, panel_nodes=16)
    z, zpp = unit([0.8, 0.5, -0.3]), unit([-0.7, -0.4, 0.6])
    nu = z
    F0, D0 = born_pairs(FLAT, z[None], zpp[None], nu[None], prm, gaussian_w, quad_hi)
    errs = []
    for eps in (4e-3, 2e-3):
        Fm, _ = born_pairs(FLAT, (z - eps * nu)[None], zpp[None], nu[None], prm, gaussian_w, quad_hi)
        errs.append(abs((F0[0] - Fm[0]) / eps - D0[0]))
    assert errs[1] < 0.02 * abs(D0[0])
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.3)


def test_born_kernel_files_round_trip(tmp_path, synth, small_cone):
    k = synth.kernel(SemiclassicalParams(0.1, 4.0))
    files = k.save(tmp_path / "born")
    assert all(p.exists() for p in files)
    back = KernelGrid.load(tmp_path / "born_value")
    assert np.array_equal(np.isnan(back.values), np.isnan(k.value.values))
    keep = ~np.isnan(k.value.values)
    assert np.array_equal(back.values[keep], k.value.values[keep])


# stationary leading term


def test_stationary_leading_closed_form(small_cone, gaussian_w):
    prm = SemiclassicalParams(0.1, 4.0 - 0.5j)
    F, D = _pairs(stationary_leading(FLAT, small_cone, prm, gaussian_w), small_cone)
    nodes = small_cone.mesh.nodes
    for p in (3, 40, 101):
        a, b = nodes[small_cone.pairs[p]]
        r = np.linalg.norm(b - a)
        line, _ = quad(lambda s: gaussian_w(a + s * (b - a) / r)[0], 0, r,
                       epsabs=1e-13, epsrel=1e-12, limit=400)
        expected = (-1j / (8 * math.pi)) / (prm.h * prm.sigma) * cmath.exp(-1j * prm.sigma * r / prm.h) * line / r
        assert F[p] == pytest.approx(expected, rel=1e-7, abs=1e-12)
    assert STATIONARY_CONSTANT == -1j / (8 * math.pi)


def test_stationary_leading_of_zero_potential(small_cone):
    F, D = _pairs(stationary_leading(FLAT, small_cone, SemiclassicalParams(0.1, 4.0),
                                     PotentialField.zero()), small_cone)
    assert np.all(F == 0) and np.all(D == 0)


# stationary phase expansion


def _gaussian_oscillatory_integral(t):
    # int_{R^2} exp(-|y|^2) exp(i t |y|^2 / 2) dy by radial quadrature
    re, _ = quad(lambda rho: 2 * math.pi * rho * math.exp(-rho**2) * math.cos(t * rho**2 / 2), 0, np.inf,
                 limit=2000)
    im, _ = quad(lambda rho: 2 * math.pi * rho * math.exp(-rho**2) * math.sin(t * rho**2 / 2), 0, np.inf,
                 limit=2000)
    return complex(re, im)


def test_stationary_phase_against_exact_integral():
    t = 4000.0
    y1, y2 = sympy.symbols("y1 y2")
    exact = math.pi / (1 - 0.5j * t)
    assert _gaussian_oscillatory_integral(50.0) == pytest.approx(math.pi / (1 - 25j), rel=1e-8)
    terms = stationary_phase_expand(np.eye(2), sympy.exp(-(y1**2 + y2**2)), t, order=1)
    assert terms[0] == pytest.approx(2j * math.pi / t, rel=1e-14)
    assert abs(terms[0] - exact) / abs(exact) <= 1e-3
    assert abs(terms.sum() - exact) / abs(exact) <= 1e-5


def test_stationary_phase_correction_improves_accuracy_at_moderate_t():
    y1, y2 = sympy.symbols("y1 y2")
    t = 50.0
    exact = math.pi / (1 - 0.5j * t)
    terms = stationary_phase_expand(np.eye(2), sympy.exp(-(y1**2 + y2**2)), t, order=2)
    errs = [abs(terms[:k + 1].sum() - exact) / abs(exact) for k in range(3)]
    assert errs[0] == pytest.approx(2 / t, rel=0.01)
    assert errs[0] > errs[1] > errs[2]


def test_stationary_phase_jet_input_and_scaling():
    jet = {(0, 0): 1.0, (2, 0): -2.0, (0, 2): -2.0}
    a = stationary_phase_expand(np.eye(2), jet, 50.0, order=1)
    b = stationary_phase_expand(np.eye(2), jet, 100.0, order=1)
    assert b[0] == a[0] / 2
    y1, y2 = sympy.symbols("y1 y2")
    c = stationary_phase_expand(np.eye(2), sympy.exp(-(y1**2 + y2**2)), 50.0, order=1)
    assert np.allclose(a, c, rtol=1e-14)


def test_stationary_phase_indefinite_signature():
    terms = stationary_phase_expand(np.diag([2.0, -0.5]), {(0, 0): 1.0}, 10.0, order=0)
    assert terms[0] == pytest.approx(2 * math.pi / 10.0, rel=1e-14)


def test_stationary_phase_zero_amplitude():
    assert np.all(stationary_phase_expand(np.eye(2), 0, 50.0, order=2) == 0)


def test_stationary_phase_rejects_ill_conditioned_matrix():
    with pytest.raises(DomainError, match="ill-conditioned"):
        stationary_phase_expand(np.diag([1.0, 1e-9]), {(0, 0): 1.0}, 50.0)
    with pytest.raises(DomainError):
        stationary_phase_expand(np.array([[1.0, 2.0], [0.0, 1.0]]), {(0, 0): 1.0}, 50.0)


# boundary pairing


@pytest.fixture(scope="module")
def pairing_mesh():
    return BoundaryMesh(12, 24)


def _separable(mesh, left, right):
    nodes = mesh.nodes
    vals = left(nodes)[:, None] * right(nodes)[None, :]
    return KernelGrid(vals.astype(complex), nodes, nodes, {})


def test_greens_rhs_separable_oracle(pairing_mesh):
    p = lambda x: 1 + x[:, 0]
    q = lambda x: x[:, 2] ** 2
    u = lambda x: np.exp(x[:, 1])
    v = lambda x: 2 - x[:, 2]
    R = _separable(pairing_mesh, p, q)
    D = _separable(pairing_mesh, u, v)
    got = greens_rhs(R, D, pairing_mesh).values
    # <q, u> over the unit sphere by an independent tensor rule
    inner, _ = quad(lambda ct: ct**2 * 2 * math.pi * np.i0(math.sqrt(1 - ct**2)), -1, 1, epsabs=1e-14)
    nodes = pairing_mesh.nodes
    expected = p(nodes)[:, None] * v(nodes)[None, :] * inner
    assert np.abs(got - expected).max() <= 1e-8 * np.abs(expected).max()


def test_greens_rhs_zero_and_bilinear(pairing_mesh):
    rng = np.random.default_rng(2)
    n = pairing_mesh.size
    nodes = pairing_mesh.nodes
    R = KernelGrid(rng.standard_normal((n, n)) + 0j, nodes, nodes, {})
    D = KernelGrid(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)), nodes, nodes, {})
    zero = KernelGrid(np.zeros((n, n), dtype=complex), nodes, nodes, {})
    assert np.all(greens_rhs(R, zero, pairing_mesh).values == 0)
    base = greens_rhs(R, D, pairing_mesh).values
    scaled = greens_rhs(R * 2.5, D * (-1.5j), pairing_mesh).values
    assert np.abs(scaled - (-3.75j) * base).max() <= 1e-12 * np.abs(base).max()


def test_greens_rhs_mesh_mismatch(pairing_mesh):
    other = BoundaryMesh(4, 8)
    n = other.size
    K = KernelGrid(np.ones((n, n), dtype=complex), other.nodes, other.nodes, {})
    with pytest.raises(DomainError):
        greens_rhs(K, K, pairing_mesh)
