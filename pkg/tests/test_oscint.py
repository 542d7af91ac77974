"""Weighted oscillatory matrix elements and their decay exponents."""

import numpy as np
import pytest

from qpkam.errors import UnderResolvedError
from qpkam.oscint import (
    WeightSpec,
    decay_bound,
    decay_exponent,
    exponent_fit,
    matrix_element,
    scan,
    zero_freq_bound,
)
from qpkam.spectrum import Grid, solve_spectrum

FLAT = WeightSpec(mu=0.0, f=lambda x: np.ones_like(x), fprime=lambda x: np.zeros_like(x))


def test_orthonormality_through_quadrature(quartic_basis):
    assert abs(matrix_element(FLAT, 0.0, 12, 30, quartic_basis)) < 1e-8
    assert matrix_element(FLAT, 0.0, 30, 30, quartic_basis).real == pytest.approx(
        1.0, abs=1e-10
    )


def test_diagonal_element_against_refined_grid(quartic_spec, quartic_basis):
    """The k=1 weighted diagonal agrees with a grid-refinement oracle to 1e-7.

    Second-order discretization: successive grid doublings extrapolate to the
    same limit, and the extrapolated values must agree at the target scale.
    """
    w = WeightSpec(mu=1.0)
    e1 = matrix_element(w, 1.0, 30, 30, quartic_basis)
    e2 = matrix_element(
        w, 1.0, 30, 30, solve_spectrum(quartic_spec, Grid(L=9.0, n_pts=128001), 30)
    )
    e3 = matrix_element(
        w, 1.0, 30, 30, solve_spectrum(quartic_spec, Grid(L=9.0, n_pts=256001), 30)
    )
    assert abs(e2 - e1) > abs(e3 - e2)
    r12 = (4.0 * e2 - e1) / 3.0
    r23 = (4.0 * e3 - e2) / 3.0
    assert abs(r12 - r23) < 1e-7


def test_decay_exponent_closed_forms():
    assert decay_exponent(1.0, 2) == pytest.approx(5.0 / 56.0, abs=1e-15)
    assert decay_exponent(0.0, 2) == pytest.approx(-1.0 / 40.0, abs=1e-15)
    assert decay_exponent(2.0, 2) == pytest.approx(5.0 / 24.0, abs=1e-15)


def test_bounds_positive_and_symmetric(quartic_basis):
    lams = quartic_basis.lambdas
    b = decay_bound(1.0, 2, 1.0, lams[29], lams[29])
    assert b > 0.0
    assert decay_bound(1.0, 2, 1.0, lams[10], lams[40]) == decay_bound(
        1.0, 2, 1.0, lams[40], lams[10]
    )
    assert zero_freq_bound(1.0, 2, lams[29], lams[29]) > 0.0


def test_fitted_exponent_oscillating(quartic_basis):
    w = WeightSpec(mu=1.0)
    fit = exponent_fit(w, 1.0, quartic_basis, range(20, 61))
    assert fit["E_fit"] <= 5.0 / 56.0 + 0.05


def test_fitted_exponent_unweighted_decays(quartic_basis):
    fit = exponent_fit(FLAT, 1.0, quartic_basis, range(20, 61))
    assert fit["E_fit"] <= 0.0


def test_fitted_exponent_zero_frequency(quartic_basis):
    w = WeightSpec(mu=1.0)
    fit = exponent_fit(w, 0.0, quartic_basis, range(20, 61))
    assert fit["E_fit"] <= 1.0 / 8.0 + 0.05


def test_hermitian_symmetry(quartic_basis):
    w = WeightSpec(mu=1.0)
    for k, m, n in [(1.0, 10, 25), (2.0, 7, 7), (0.5, 3, 40)]:
        a = matrix_element(w, k, m, n, quartic_basis)
        b = matrix_element(w, -k, n, m, quartic_basis)
        assert a == pytest.approx(np.conj(b), abs=1e-10)


@pytest.mark.parametrize("lam", [10.0, 100.0, 1000.0])
def test_linear_phase_model_integral(lam):
    # |int_0^1 e^{i lam x} dx| <= c1 / lam with c1 just above 2.
    x = np.linspace(0.0, 1.0, 20001)
    val = np.trapezoid(np.exp(1j * lam * x), x)
    assert abs(val) <= 2.01 / lam


def test_single_constant_covers_scanned_window(quartic_basis):
    w = WeightSpec(mu=1.0)
    rows = scan(w, 1.0, 2, quartic_basis, range(20, 61))
    ratios = [r["abs"] / r["bound"] for r in rows if r["abs"] > 1e-13]
    assert ratios
    c_fit = max(ratios)
    assert c_fit < 50.0
    assert all(r["abs"] <= c_fit * r["bound"] * (1.0 + 1e-12) for r in rows)


def test_under_resolved_rejected(quartic_basis):
    h = quartic_basis.grid.h
    too_fast = 0.4 / h
    with pytest.raises(UnderResolvedError):
        matrix_element(WeightSpec(mu=1.0), too_fast, 5, 5, quartic_basis)
