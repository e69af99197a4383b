import cmath
import math

import numpy as np
import pytest
from scipy.integrate import quad

from hfcalderon.errors import BandError, DomainError
from hfcalderon.geometry import MetricSpec
from hfcalderon.hadamard import (SemiclassicalParams, amplitudes, exact_flat_kernel, kernel_grid,
                                 laplace_beltrami, parametrix_kernel, pde_residual, residual_kernel,
                                 stencil_derivatives, stencil_offsets, u0, u1)
from hfcalderon.potential import PotentialField

from .conftest import unit

FLAT = MetricSpec.euclidean()


@pytest.fixture(scope="module")
def gaussian_v():
    return PotentialField.gaussian(amplitude=1.0, width=0.25, center=(0.05, -0.1, 0.0),
                                   support_radius=0.6, spacing=0.025)


def test_params_validation():
    with pytest.raises(DomainError):
        SemiclassicalParams(0.0, 1.0)
    with pytest.raises(DomainError):
        SemiclassicalParams(1.5, 1.0)
    with pytest.raises(DomainError):
        SemiclassicalParams(0.1, 0.0)
    with pytest.raises(DomainError, match="decaying resolvent branch"):
        SemiclassicalParams(0.1, 1.0 + 0.1j)
    assert SemiclassicalParams(0.1, 1 - 1j).sigma == 1 - 1j


# leading amplitude


def test_u0_flat_diameter():
    assert u0(FLAT, [1, 0, 0], [-1, 0, 0]) == pytest.approx(1 / (8 * math.pi), rel=1e-14)


def test_u0_constant_conformal():
    c = 1.6
    z, zp = np.array([0.6, 0.8, 0.0]), np.array([0.0, -0.6, 0.8])
    expected = 1 / (4 * math.pi * c * np.linalg.norm(z - zp))
    assert u0(MetricSpec.constant_conformal(c), z, zp) == pytest.approx(expected, rel=1e-14)


def test_u0_coincident_points():
    with pytest.raises(DomainError):
        u0(FLAT, [0.1, 0, 0], [0.1, 0, 0])


def test_u0_solves_transport_equation(bump_metric):
    # 2 <grad r, grad U0>_g = (positive Laplacian of r) U0 along the geodesic from the pole
    pole = unit([-0.3, -0.9, 0.2])
    step = 0.01
    offs = stencil_offsets(step)
    for x in (np.array([0.3, 0.1, -0.1]),):
        amp = amplitudes(bump_metric, x + offs, pole)
        lap_r, grad_r = stencil_derivatives(amp.r[None], step)
        _, grad_u = stencil_derivatives(amp.u0[None], step)
        c2 = bump_metric.factor(x[None])[0] ** 2
        lb_r = laplace_beltrami(bump_metric, x[None], amp.r[None], step)[0]
        residual = 2 * grad_r[0] @ grad_u[0] / c2 - lb_r * amp.u0[0]
        assert abs(residual) / amp.u0[0] < 1e-5
        assert amp.u0[0] > 0


# first amplitude


def test_u1_vanishes_flat_without_potential():
    assert u1(FLAT, [1, 0, 0], [0, 1, 0]) == 0
    assert u1(FLAT, [1, 0, 0], [0, 1, 0], V=PotentialField.zero()) == 0


def test_u1_flat_matches_line_quadrature(gaussian_v):
    z, zp = unit([0.9, 0.3, -0.1]), unit([-0.8, -0.2, 0.3])
    sigma = 2.0 - 0.5j
    d = np.linalg.norm(z - zp)
    line, _ = quad(lambda s: gaussian_v(zp + s * (z - zp) / d)[0], 0, d, epsabs=1e-13, limit=200)
    expected = -line / d / (8j * math.pi * sigma)
    assert u1(FLAT, z, zp, V=gaussian_v, sigma=sigma) == pytest.approx(expected, rel=1e-6)


def test_u1_constant_potential_on_chord():
    v0 = 0.7
    V = PotentialField.smooth_indicator(radius=0.5, transition=0.05, amplitude=v0)
    sigma = 1.5
    got = u1(FLAT, [-0.25, 0.0, 0.0], [0.25, 0.0, 0.0], V=V, sigma=sigma)
    assert got == pytest.approx(-v0 / (8j * math.pi * sigma), rel=1e-6)


def test_u1_scales_inversely_with_sigma(gaussian_v):
    z, zp = unit([1, 0.1, 0]), unit([-1, 0.2, 0.1])
    a = u1(FLAT, z, zp, V=gaussian_v, sigma=1.0)
    b = u1(FLAT, z, zp, V=gaussian_v, sigma=3.0)
    assert a != 0
    assert b == pytest.approx(a / 3, rel=1e-13)


# parametrix


def test_parametrix_flat_value():
    got = parametrix_kernel(FLAT, [1, 0, 0], [-1, 0, 0], SemiclassicalParams(0.1, 1.0))
    assert got == pytest.approx(cmath.exp(-20j) * 100 / (8 * math.pi), rel=1e-13)


def test_parametrix_matches_exact_flat_kernel():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((12, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    for h, sigma in ((1.0, 1.0), (0.1, 2.0), (0.05, 1 - 0.3j)):
        prm = SemiclassicalParams(h, sigma)
        a = kernel_grid(FLAT, pts, pts, prm).values
        b = kernel_grid(FLAT, pts, pts, prm, exact=True).values
        keep = np.isfinite(a)
        assert keep.sum() > 0
        assert np.abs(a[keep] - b[keep]).max() / np.abs(b[keep]).max() < 1e-12


def test_parametrix_constant_conformal_is_rescaled_flat():
    z, zp = unit([1, 0.2, 0.3]), unit([-0.2, 1, -0.4])
    prm = SemiclassicalParams(0.1, 1.0)
    got = parametrix_kernel(MetricSpec.constant_conformal(2.0), z, zp, prm)
    assert got == pytest.approx(exact_flat_kernel(2 * z, 2 * zp, prm), rel=1e-12)


def test_parametrix_symmetry_flat(gaussian_v):
    z, zp = unit([0.7, 0.6, -0.2]), unit([-0.9, 0.1, 0.4])
    prm = SemiclassicalParams(0.1, 2.0)
    a = parametrix_kernel(FLAT, z, zp, prm, V=gaussian_v)
    b = parametrix_kernel(FLAT, zp, z, prm, V=gaussian_v)
    assert a == pytest.approx(b, rel=1e-10)


def test_parametrix_band_error():
    with pytest.raises(BandError):
        parametrix_kernel(FLAT, [1, 0, 0], unit([1, 0.05, 0]), SemiclassicalParams(0.1))


# exact flat kernel


def test_exact_kernel_decaying_value():
    got = exact_flat_kernel([1, 0, 0], [0, 0, 0], SemiclassicalParams(1.0, -1j))
    assert got == pytest.approx(math.exp(-1) / (4 * math.pi), rel=1e-14)


def test_exact_kernel_is_a_fundamental_solution():
    # off the pole the kernel solves the homogeneous equation
    prm = SemiclassicalParams(0.5, 1.0 - 0.2j)
    step = 1e-3
    x = np.array([0.3, -0.2, 0.1])
    vals = exact_flat_kernel(x + stencil_offsets(step), np.zeros(3), prm)
    lap = laplace_beltrami(FLAT, x[None], vals[None], step)[0]
    residual = prm.h**2 * lap - prm.sigma**2 * vals[0]
    assert abs(residual) / abs(vals[0]) < 1e-6
    # with h = 1, sigma = -i the kernel integrates to the inverse of the zero-frequency symbol
    total, _ = quad(lambda r: 4 * math.pi * r**2 * math.exp(-r) / (4 * math.pi * r), 0, np.inf)
    assert total == pytest.approx(1.0, rel=1e-12)


# remainder kernel


def test_residual_kernel_flat_without_potential():
    assert residual_kernel(FLAT, [0.3, 0, 0], [-0.3, 0.1, 0], SemiclassicalParams(0.1)) == 0


def test_residual_kernel_boundary_proximity(gaussian_v):
    with pytest.raises(DomainError, match="boundary proximity"):
        residual_kernel(FLAT, [0.995, 0, 0], [-1, 0, 0], SemiclassicalParams(0.1), V=gaussian_v)


def test_pde_residual_matches_predicted_remainder(gaussian_v):
    targets = np.array([[0.3, 0.1, -0.1], [-0.2, 0.35, 0.1], [0.1, -0.3, 0.3]])
    pole = np.array([0.0, 0.0, -1.0])
    errs = []
    for step in (0.01, 0.005):
        res = pde_residual(FLAT, targets, pole, [0.2, 0.1], 2.0, V=gaussian_v, step=step)
        errs.append(np.abs(res["residual"] - res["predicted"]).max())
    assert np.abs(res["predicted"]).max() > 1e-3
    assert errs[1] < 1e-3 * np.abs(res["predicted"]).max()
    assert errs[0] / errs[1] > 4
    # the remainder itself halves with h
    ratio = np.abs(res["residual"][0]).max() / np.abs(res["residual"][1]).max()
    assert ratio == pytest.approx(2.0, rel=0.2)


def test_remainder_times_distance_stays_bounded(gaussian_v):
    prm = SemiclassicalParams(0.1, 1.0)
    spec = MetricSpec.euclidean(band=0.05)
    z = np.array([0.1, 0.0, 0.0])
    sizes = []
    for r in (0.6, 0.3, 0.15, 0.08):
        zp = z + r * unit([0.2, 1.0, 0.3])
        sizes.append(r * abs(residual_kernel(spec, z, zp, prm, V=gaussian_v, step=0.005)))
    assert all(np.isfinite(sizes))
    assert max(sizes[2:]) <= 2 * max(sizes[:2])
