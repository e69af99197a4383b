import math

import numpy as np
import pytest
import sympy
from scipy.integrate import quad

from hfcalderon.dtn_factor import (X, XN, CollarMetric, EllipticityError, SymbolTable, collar_symbols,
                                   dtn_kernel, factor_symbols, frequency_window, heat_apply,
                                   heat_symbols, residue_u0, smoothing_exponent, symbol_table)
from hfcalderon.errors import DomainError, ResolutionError


def _bracket(xi):
    return np.sqrt(1.0 + xi**2)


# collar symbols


def test_flat_collar_symbols():
    cs = collar_symbols(CollarMetric.flat())
    assert cs.e == 0 and cs.q1 == 0
    assert np.allclose(cs.evaluate("q0", 0.3, 0.0, np.array([0.5, 2.0])), [0.25, 4.0], rtol=1e-15)


def test_expanding_collar_first_order_coefficient():
    cs = collar_symbols(CollarMetric.expanding())
    assert sympy.simplify(cs.e + 1 / (1 + XN)) == 0
    xn = np.linspace(0, 1, 5)
    assert np.allclose(cs.evaluate("e", 0.0, xn, 1.0).real, -1 / (1 + xn), rtol=1e-14)


def test_subprincipal_term_matches_finite_differences():
    cm = CollarMetric.expanding(modulation=0.3)
    cs = collar_symbols(cm)
    x, xn, xi, eps = 0.7, 0.4, 2.5, 1e-3

    def d_dx(f):
        vals = [f(x + m * eps) for m in (-2, -1, 1, 2)]
        return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * eps)

    g = lambda s: float(cm.sample(s, xn))
    expected = -1j * (0.5 / g(x) * d_dx(lambda s: math.log(g(s))) + d_dx(lambda s: 1 / g(s))) * xi
    assert abs(cs.evaluate("q1", x, xn, xi) - expected) < 1e-8


# factorization


def test_flat_factorization_is_exact():
    fs = factor_symbols(CollarMetric.flat(), 3)
    xi = np.array([-3.0, -1.5, 1.5, 3.0])
    assert np.allclose(fs.evaluate(0, 0.2, 0.1, xi, regularize=False), np.abs(xi), rtol=1e-15)
    for j in range(1, 4):
        assert np.all(fs.evaluate(j, 0.2, 0.1, xi, regularize=False) == 0)


def test_principal_symbol_squares_to_q0():
    cm = CollarMetric.expanding(modulation=0.3)
    fs = factor_symbols(cm, 1)
    x = np.linspace(0, 2 * np.pi, 9)[:, None, None]
    xn = np.linspace(0, 1, 5)[None, :, None]
    xi = np.linspace(-6, 6, 13)[None, None, :]
    a0 = fs.evaluate(0, x, xn, xi, regularize=False)
    q0 = fs.collar.evaluate("q0", x, xn, xi)
    assert np.abs(a0**2 - q0).max() <= 1e-12 * np.abs(q0).max()


def test_regularized_principal_symbol():
    fs = factor_symbols(CollarMetric.flat(), 1)
    xi = np.array([0.0, 0.3, 0.5, 1.0, 4.0])
    a0 = fs.evaluate(0, 0.0, 0.0, xi).real
    assert np.allclose(a0[:3], _bracket(xi[:3]), rtol=1e-14)
    assert np.allclose(a0[3:], np.abs(xi[3:]), rtol=1e-14)
    assert np.all(fs.evaluate(1, 0.0, 0.0, xi) == 0)


def test_factorization_residual_vanishes_on_a_generic_collar():
    # on a one-dimensional boundary the tangential operator is an exact square
    cm = CollarMetric((1 + XN) ** 2 + sympy.Rational(3, 10) * XN * sympy.cos(X), 1.0, "generic")
    xi = np.array([2.0, 20.0, 80.0])
    x = np.linspace(0, 2 * np.pi, 16, endpoint=False)[:, None]
    for N in range(3):
        res = np.abs(factor_symbols(cm, N).residual(x, 0.3, xi[None, :]))
        assert res.max() <= 1e-12 * xi.max() ** 2


def test_factorization_errors():
    with pytest.raises(DomainError):
        factor_symbols(CollarMetric.flat(), 4)
    with pytest.raises(EllipticityError):
        factor_symbols(CollarMetric(sympy.Integer(-1), 1.0, "negative"), 0)
    with pytest.raises(EllipticityError):
        factor_symbols(CollarMetric.expanding(modulation=1.5), 0)


# heat parametrix


def test_flat_heat_symbol_closed_form():
    h = 0.1
    t = np.linspace(0, 0.5, 11)
    xi = np.linspace(-4, 4, 17)
    st = heat_symbols(SymbolTable(factor_symbols(CollarMetric.flat(), 0), t, [0.0], xi,
                                  regularize=False), h)
    expected = np.exp(-np.abs(xi)[None, :] * t[:, None] / h)
    assert np.allclose(st.u[0][:, 0, :], expected, rtol=1e-13, atol=0)


def test_heat_symbols_at_time_zero():
    st = heat_symbols(symbol_table(CollarMetric.expanding(0.3), 2, np.linspace(0, 0.4, 9),
                                   np.linspace(0, 2 * np.pi, 16, endpoint=False),
                                   np.linspace(-5, 5, 11)), 0.1)
    assert np.all(st.u[0][0] == 1)
    assert np.all(st.u[1:, 0] == 0)


def test_first_heat_symbol_converges_at_second_order():
    cm = CollarMetric.expanding(0.3)
    x = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    xi = np.linspace(1.5, 6, 7)
    finals = []
    for nt in (11, 21, 41):
        st = heat_symbols(symbol_table(cm, 1, np.linspace(0, 0.5, nt), x, xi), 0.2)
        finals.append(st.u[1][-1])
    ratio = np.abs(finals[0] - finals[1]).max() / np.abs(finals[1] - finals[2]).max()
    assert ratio == pytest.approx(4.0, rel=0.25)


def test_residue_matches_exponential():
    a0 = np.array([0.5, 1.0 + 0.2j, 3.0])
    rho = _bracket(np.array([0.5, 1.0, 3.0]))
    got = residue_u0(a0, 0.3, 0.1, rho)
    assert np.abs(got - np.exp(-a0 * 0.3 / 0.1)).max() < 1e-8


def test_smoothing_bound_and_exponents():
    h, t = 0.05, 0.5
    xi = np.linspace(0, 50, 20001)
    st = heat_symbols(SymbolTable(factor_symbols(CollarMetric.flat(), 0), [0.0, t], [0.0], xi,
                                  regularize=False), h)
    for N in range(1, 5):
        sup = np.max(xi**N * np.abs(st.u[0][-1, 0]))
        assert sup <= (N * h / (math.e * t)) ** N * (1 + 1e-12)
        assert smoothing_exponent([0.1, 0.05, 0.025], t, N) >= N - 1e-3


def test_heat_requires_ellipticity_and_valid_grid():
    st = SymbolTable(factor_symbols(CollarMetric.flat(), 0), [0.0, 0.1], [0.0], [1.0, 2.0])
    st.a = -st.a
    with pytest.raises(EllipticityError):
        heat_symbols(st, 0.1)
    bad = SymbolTable(factor_symbols(CollarMetric.flat(), 0), [0.1, 0.2], [0.0], [1.0])
    with pytest.raises(DomainError):
        heat_symbols(bad, 0.1)


# heat application


@pytest.fixture(scope="module")
def flat_table():
    return SymbolTable(factor_symbols(CollarMetric.flat(), 0), np.linspace(0, 1, 11), [0.0], [1.0],
                       regularize=False)


def test_heat_apply_identity_at_time_zero(flat_table):
    f = np.random.default_rng(0).standard_normal(64)
    assert np.array_equal(heat_apply(flat_table, f, 0.0, 0.1), f.astype(complex))


def test_heat_apply_single_mode(flat_table):
    n, k, t = 64, 5, 0.3
    x = 2 * np.pi * np.arange(n) / n
    out = heat_apply(flat_table, np.exp(1j * k * x), t, 0.1)
    assert np.abs(out - np.exp(-k * t) * np.exp(1j * k * x)).max() < 1e-12


def test_heat_apply_semigroup(flat_table):
    f = np.random.default_rng(1).standard_normal(64)
    once = heat_apply(flat_table, f, 0.5, 0.1)
    twice = heat_apply(flat_table, heat_apply(flat_table, f, 0.2, 0.1), 0.3, 0.1)
    assert np.abs(once - twice).max() < 1e-12
    with pytest.raises(DomainError):
        heat_apply(flat_table, f, 0.25, 0.1)


def test_heat_apply_damps_high_modes(flat_table):
    n = 256
    x = 2 * np.pi * np.arange(n) / n
    hs = np.array([0.1, 0.05, 0.025])
    norms = []
    for h in hs:
        k = int(math.ceil(1 / h))
        f = np.cos(k * x) + np.sin((k + 3) * x)
        norms.append(np.linalg.norm(heat_apply(flat_table, f, 0.5, h)) / math.sqrt(n))
    assert np.polyfit(np.log(hs), np.log(norms), 1)[0] >= 3


def test_heat_apply_on_a_curved_collar():
    st = symbol_table(CollarMetric.expanding(0.3), 1, np.linspace(0, 0.4, 9), [0.0], [1.0])
    n = 32
    x = 2 * np.pi * np.arange(n) / n
    out = heat_apply(st, np.cos(2 * x), 0.4, 0.1, order=1)
    assert np.all(np.isfinite(out))
    assert np.linalg.norm(out) < np.linalg.norm(np.cos(2 * x))


# DtN kernel


def test_identity_symbol_gives_scaled_delta():
    n, h = 64, 0.1
    kg = dtn_kernel(None, h, n, band=0.0, window=None, symbol=lambda x, xi: np.ones_like(x * xi))
    assert np.allclose(kg.values * (2 * np.pi / n), np.eye(n) / h, atol=1e-12)


def test_bracket_symbol_matches_oscillatory_quadrature():
    n, h, start = 2048, 0.1, 0.1
    kg = dtn_kernel(None, h, n, band=0.1, window=start, symbol=lambda x, xi: _bracket(xi) + 0 * x)

    def integrand(k):
        return _bracket(h * k) * frequency_window(np.array([k]), n, start)[0]

    scale = np.nanmax(np.abs(kg.values))
    for m in (40, 150, 700):
        d = 2 * np.pi * m / n
        val, _ = quad(integrand, 0, n / 2, weight="cos", wvar=d, limit=4000, epsabs=1e-10)
        expected = 2 * val / (2 * np.pi * h)
        assert abs(kg.values[0, m] - expected) <= 1e-6 * scale


def test_kernel_is_real_and_symmetric_for_even_symbols():
    fs = factor_symbols(CollarMetric.flat(), 0)
    kg = dtn_kernel(fs, 0.05, 256, regularize=True)
    K = kg.values
    keep = np.isfinite(K)
    assert np.abs(K[keep].imag).max() <= 1e-12 * np.abs(K[keep]).max()
    assert np.allclose(np.nan_to_num(K), np.nan_to_num(K.T), rtol=0, atol=1e-12 * np.abs(K[keep]).max())


def test_kernel_is_uniform_in_h_off_the_band():
    fs = factor_symbols(CollarMetric.flat(), 0)
    sups = [np.nanmax(np.abs(dtn_kernel(fs, h, 512, band=0.1).values))
            for h in (0.1, 0.05, 0.025)]
    assert max(sups) / min(sups) < 2


def test_kernel_aliasing_check():
    n = 64
    with pytest.raises(ResolutionError, match="refine"):
        dtn_kernel(None, 0.1, n, symbol=lambda x, xi: 1 + 0.3 * np.cos((n // 2 - 1) * x) + 0 * xi)


def test_kernel_band_is_masked():
    kg = dtn_kernel(factor_symbols(CollarMetric.flat(), 0), 0.1, 64, band=0.3, regularize=True)
    assert np.all(np.isnan(np.diag(kg.values)))
    assert np.isfinite(kg.values[0, 32])
