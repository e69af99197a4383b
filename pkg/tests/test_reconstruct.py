import csv

import numpy as np
import pytest

from hfcalderon.boundary import BoundaryMesh
from hfcalderon.errors import DomainError, NumericalError
from hfcalderon.geometry import MetricSpec
from hfcalderon.hadamard import SemiclassicalParams
from hfcalderon.potential import PotentialField
from hfcalderon.reconstruct import (STATIONARY_CONSTANT, calibrate_constant, extract_ray_data,
                                    fit_constant, loglog_slope, reconstruct_potential, sweep_h)
from hfcalderon.scatter import kernel_from_ray_data, stationary_leading, stationary_weight
from hfcalderon.xray import InteriorGrid, RayTransform, build_cone, forward

FLAT = MetricSpec.euclidean()
SUPPORT = ((0.0, 0.0, 0.0), 0.7)


@pytest.fixture(scope="module")
def bump():
    return PotentialField.gaussian(amplitude=1.0, width=0.2, center=(0.1, -0.1, 0.05),
                                   support_radius=0.6, spacing=0.025)


@pytest.fixture(scope="module")
def coarse_cone():
    return build_cone(FLAT, BoundaryMesh(8, 16))


def test_extract_inverts_the_leading_term(coarse_cone, bump):
    prm = SemiclassicalParams(0.1, 4.0 - 0.3j)
    xw = forward(coarse_cone, bump, stationary_weight(FLAT, coarse_cone)).values
    kern = kernel_from_ray_data(coarse_cone, prm, xw)
    back = extract_ray_data(kern, coarse_cone, prm).values
    assert np.abs(back - xw).max() <= 1e-10 * np.abs(xw).max()


def test_extract_validates_shapes(coarse_cone):
    with pytest.raises(DomainError, match="does not match"):
        extract_ray_data(np.ones(3), coarse_cone, SemiclassicalParams(0.1, 4.0))


def test_zero_data_reconstructs_zero(coarse_cone):
    res = reconstruct_potential(np.zeros(coarse_cone.n_pairs), coarse_cone, SemiclassicalParams(0.1, 4.0),
                                transform=RayTransform(coarse_cone, InteriorGrid(16), support=SUPPORT))
    assert np.all(res.field == 0)


def test_stationary_data_reconstruction_accuracy(bump):
    cone = build_cone(FLAT, BoundaryMesh(12, 24))
    prm = SemiclassicalParams(0.05, 4.0)
    kern = stationary_leading(FLAT, cone, prm, bump)
    op = RayTransform(cone, InteriorGrid(32), support=SUPPORT, weight=stationary_weight(FLAT, cone))
    with pytest.warns(RuntimeWarning, match="CG stopped"):
        res = reconstruct_potential(kern, cone, prm, transform=op, truth=bump)
    assert res.error <= 0.05
    assert res.field.shape == (32, 32, 32)


def test_result_files(tmp_path, coarse_cone, bump):
    prm = SemiclassicalParams(0.1, 4.0)
    op = RayTransform(coarse_cone, InteriorGrid(12), support=SUPPORT,
                      weight=stationary_weight(FLAT, coarse_cone))
    with pytest.warns(RuntimeWarning):
        res = reconstruct_potential(stationary_leading(FLAT, coarse_cone, prm, bump), coarse_cone, prm,
                                    maxiter=5, transform=op, truth=bump)
    files = res.save(tmp_path)
    assert all(p.exists() for p in files)
    raw = np.frombuffer((tmp_path / "reconstruction_field.bin").read_bytes(), dtype="<f8")
    field = (raw[0::2] + 1j * raw[1::2]).reshape(12, 12, 12)
    assert np.array_equal(field, res.field)


# calibration


def test_fit_constant_recovers_a_known_factor():
    rng = np.random.default_rng(0)
    basis = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    C, resid = fit_constant((2 - 3j) * basis, basis)
    assert C == pytest.approx(2 - 3j, rel=1e-14) and resid < 1e-14
    with pytest.raises(NumericalError):
        fit_constant(basis, np.zeros(50))


def test_calibration_is_deterministic_and_converges_in_h():
    a = calibrate_constant(SemiclassicalParams(0.1, 4.0))
    b = calibrate_constant(SemiclassicalParams(0.1, 4.0))
    assert a is b
    c = calibrate_constant(SemiclassicalParams(0.05, 4.0))
    assert a.deviation / c.deviation == pytest.approx(2.0, rel=0.4)
    assert abs(c.constant.imag - STATIONARY_CONSTANT.imag) < 0.1 * abs(STATIONARY_CONSTANT)


# convergence sweeps


@pytest.mark.filterwarnings("ignore:CG stopped:RuntimeWarning")
def test_born_sweep_error_is_first_order_in_h(coarse_cone, bump):
    table = sweep_h(FLAT, coarse_cone, bump, [0.2, 0.1, 0.05], source="born",
                    grid=InteriorGrid(24), support=SUPPORT)
    errs = [r["error"] for r in table.rows]
    assert errs[0] > errs[1] > errs[2]
    assert table.slope >= 0.8


def test_sweep_without_potential(tmp_path, coarse_cone):
    table = sweep_h(FLAT, coarse_cone, PotentialField.zero(), [0.2, 0.1, 0.05], source="stationary",
                    grid=InteriorGrid(12), support=SUPPORT)
    assert [r["error"] for r in table.rows] == [0.0, 0.0, 0.0]
    path = table.save_csv(tmp_path / "conv.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["h", "relative_error", "kernel_seconds", "invert_seconds"]
    assert [float(r[0]) for r in rows[1:]] == [0.2, 0.1, 0.05]


def test_sweep_validation(coarse_cone, bump):
    with pytest.raises(DomainError):
        sweep_h(FLAT, coarse_cone, bump, [0.1, 0.2, 0.05])
    with pytest.raises(DomainError):
        sweep_h(FLAT, coarse_cone, bump, [0.2, 0.1])
    with pytest.raises(DomainError, match="unknown data source"):
        sweep_h(FLAT, coarse_cone, bump, [0.2, 0.1, 0.05], source="exact")


def test_loglog_slope():
    hs = np.array([0.2, 0.1, 0.05])
    assert loglog_slope(hs, 3 * hs**1.5) == pytest.approx(1.5, rel=1e-12)
