"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``hfcal selftest``.
"""
import pytest

from hfcalderon.acceptance import CRITERIA


def _check(number, capsys):
    res = CRITERIA[number]()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()


def test_ac1_flat_exactness(capsys):
    _check(1, capsys)


def test_ac2_pde_residual_halves(capsys):
    _check(2, capsys)


def test_ac3_born_tends_to_stationary_leading_term(capsys):
    _check(3, capsys)


def test_ac4_ray_transform_inversion(capsys):
    _check(4, capsys)


def test_ac5_end_to_end_reconstruction(capsys):
    _check(5, capsys)


def test_ac6_second_born_term_is_small(capsys):
    _check(6, capsys)


def test_ac7_dtn_factorization_and_heat(capsys):
    _check(7, capsys)


def test_ac8_geometry_oracles(capsys):
    _check(8, capsys)


def test_unknown_criterion_is_rejected():
    from hfcalderon.acceptance import run_suite
    with pytest.raises(KeyError):
        run_suite([9])
