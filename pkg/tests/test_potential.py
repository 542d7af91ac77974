"""Potential evaluation, growth assumptions, and turning points."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpkam import potential
from qpkam.errors import (
    NoTurningPointError,
    UnsupportedDerivativeError,
    ValidationError,
)
from qpkam.potential import PotentialSpec, turning_point, verify_assumptions


def test_quartic_point_values(quartic_spec):
    assert potential.eval(quartic_spec, 2.0) == pytest.approx(16.0, rel=1e-14)
    assert potential.eval(quartic_spec, -2.0, order=1) == pytest.approx(
        -32.0, rel=1e-14
    )


def test_lower_order_coefficient():
    # V = x^4 (1 + 0.5 / x^2): the correction contributes 0.5 * x^2.
    spec = PotentialSpec(ell=2.0, c0=1.0, w_coeffs=(0.5,), R0=0.5)
    assert potential.eval(spec, 2.0) == pytest.approx(18.0, rel=1e-14)


def test_derivatives_beyond_third_rejected(quartic_spec):
    with pytest.raises(UnsupportedDerivativeError):
        potential.eval(quartic_spec, 1.0, order=4)


@settings(deadline=None, max_examples=60)
@given(x=st.floats(min_value=1e-3, max_value=50.0))
def test_even_symmetry(x):
    spec = PotentialSpec(ell=2.0, c0=1.3, w_coeffs=(0.2,), R0=0.5)
    assert potential.eval(spec, x) == pytest.approx(
        potential.eval(spec, -x), rel=1e-13, abs=1e-300
    )
    assert potential.eval(spec, x, order=1) == pytest.approx(
        -potential.eval(spec, -x, order=1), rel=1e-13, abs=1e-300
    )


def test_assumption_report_monomial(quartic_spec):
    rep = verify_assumptions(quartic_spec, np.linspace(1.0, 10.0, 1801))
    assert rep["C1_fit"] == pytest.approx(4.0, abs=1e-10)
    assert rep["D1_fit"] == pytest.approx(1.0, abs=1e-10)
    assert rep["D2_fit"] == pytest.approx(1.0, abs=1e-10)
    assert rep["convexity_ok"] and rep["scaling_ok"]


def test_scaling_window(quartic_spec):
    # Halving the argument from x=4 lands inside the two-sided scaling
    # window [theta^{2 ell} V(x), theta V(x)]; monomials attain the floor.
    v4 = potential.eval(quartic_spec, 4.0)
    v2 = potential.eval(quartic_spec, 2.0)
    assert v2 == pytest.approx(0.5**4 * v4, rel=1e-14)
    assert 0.5**4 * v4 <= v2 <= 0.5 * v4


def test_concavity_beyond_r0_rejected():
    # V = x^4 - x^2 + 0.5 is positive everywhere yet concave on
    # x < 1/sqrt(6), which pokes past R0 = 0.3.
    spec = PotentialSpec(ell=2.0, c0=1.0, w_coeffs=(-1.0, 0.5), R0=0.3)
    with pytest.raises(ValidationError):
        verify_assumptions(spec, np.linspace(0.3, 0.4, 501))


def test_turning_point_quartic(quartic_spec):
    assert turning_point(quartic_spec, 16.0) == pytest.approx(2.0, rel=1e-12)
    assert turning_point(quartic_spec, 1.0604) == pytest.approx(
        1.01476955657355, rel=1e-10
    )


def test_no_turning_point_below_threshold(quartic_spec):
    with pytest.raises(NoTurningPointError):
        turning_point(quartic_spec, 1e-4)


@settings(deadline=None, max_examples=60)
@given(
    lam=st.floats(min_value=2.0, max_value=1e4),
    ell=st.sampled_from([2.0, 2.5, 3.0]),
)
def test_turning_point_monomial_inverse(lam, ell):
    spec = PotentialSpec(ell=ell, c0=1.0, R0=0.5)
    x = turning_point(spec, lam)
    assert x == pytest.approx(lam ** (1.0 / (2.0 * ell)), rel=1e-10)
