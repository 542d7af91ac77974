"""Uniform turning-point approximation and the fractional Hankel kernel."""

import math

import numpy as np
import pytest

from qpkam import potential
from qpkam.errors import BranchError, RayDomainError, UnsupportedIndexError
from qpkam.langer import (
    approximation_error,
    build_frame,
    hankel1_third,
    langer_eigenfunction,
    langer_scan,
    phase_integral,
    prefactored_magnitude,
    turning_region_bounds,
)
from qpkam.potential import PotentialSpec

# Quadrature oracles (mpmath, 50 digits):
#   int_0^1 sqrt(1 - t^3) dt variants for the quartic well at lam = X = 1.
INNER_PHASE = 0.87401918476404  # int_0^1 sqrt(1 - t^4) dt
OUTER_PHASE = 2.04344267482579  # int_1^2 sqrt(t^4 - 1) dt
# 40-term power series with exact rational recurrences, evaluated at -1.
H13_AT_MINUS_1 = -0.606887505046529 + 0.493556710667318j


def test_phase_integral_inner(quartic_spec):
    z = phase_integral(quartic_spec, 1.0, 1.0, 0.0)
    assert complex(z).real == pytest.approx(-INNER_PHASE, abs=1e-10)
    assert abs(complex(z).imag) < 1e-12


def test_phase_integral_at_turning_point(quartic_spec):
    assert complex(phase_integral(quartic_spec, 1.0, 1.0, 1.0)) == 0.0


def test_phase_integral_outer(quartic_spec):
    z = complex(phase_integral(quartic_spec, 1.0, 1.0, 2.0))
    assert z.imag == pytest.approx(OUTER_PHASE, abs=1e-10)
    assert abs(z.real) < 1e-12


def test_phase_integral_rejects_interior_sign_change(quartic_spec):
    # lam - V vanishes at x = 2^{1/4} strictly inside [0, 3].
    with pytest.raises(BranchError):
        phase_integral(quartic_spec, 2.0, 3.0, 0.0)


def test_hankel_series_oracle():
    assert hankel1_third(-1.0) == pytest.approx(H13_AT_MINUS_1, abs=1e-9)


def test_hankel_ray_bounds():
    # Negative real ray: |sqrt(pi z / 2) H(z)| stays at or below 1.
    for z in np.linspace(-50.0, -1.2, 50):
        assert prefactored_magnitude(z) <= 1.0 + 1e-12
    # Upper imaginary ray: decays at least like e^{-|z|}.
    assert prefactored_magnitude(10j) <= math.exp(-10.0)
    for t in np.linspace(2.0, 30.0, 50):
        assert prefactored_magnitude(1j * t) <= math.exp(-t) * 1.05


def test_hankel_off_ray_rejected():
    with pytest.raises(RayDomainError):
        hankel1_third(1.0 + 1.0j)


def test_langer_matches_solver(quartic_spec, quartic_basis):
    frame = build_frame(quartic_spec, quartic_basis, 30)
    err = approximation_error(frame, quartic_basis)
    assert err["e_sup"] < 0.05


def test_langer_real_below_turning_point(quartic_spec, quartic_basis):
    frame = build_frame(quartic_spec, quartic_basis, 30)
    assert frame.imag_residue <= 1e-9


def test_normalization_scale_stability(quartic_spec, quartic_basis):
    """C_n / X_n^{(ell-1)/2} drifts by less than 20% over a 30-mode window."""
    rows = langer_scan(quartic_spec, quartic_basis, range(12, 43))
    scaled = np.array([r["cn_scaled"] for r in rows])
    assert scaled.max() / scaled.min() < 1.2


def test_turning_region_envelopes(quartic_spec, quartic_basis):
    frame = build_frame(quartic_spec, quartic_basis, 30)
    rep = turning_region_bounds(frame)
    assert rep["normalizable"]
    assert 0.0 < rep["a1"] <= rep["a2"]
    assert 0.0 < rep["A1"] <= rep["A2"]

    # Monomial gap ratio (lam - V) / (X^3 (X - x)): tends to 2*ell = 4 as
    # x -> X from below, equals c0 = 1 at x = 0.
    lam, X = frame.lam, frame.X
    x_near = X * (1.0 - 1e-6)
    near = (lam - potential.eval(quartic_spec, x_near)) / (X**3 * (X - x_near))
    assert near == pytest.approx(4.0, rel=1e-4)
    at_zero = (lam - potential.eval(quartic_spec, 0.0)) / (X**3 * X)
    assert at_zero == pytest.approx(1.0, rel=1e-10)


def test_error_decreases_with_mode_number(quartic_spec, quartic_basis):
    rows = langer_scan(quartic_spec, quartic_basis, (6, 12, 24, 48))
    errs = [r["e_sup"] for r in rows]
    assert errs == sorted(errs, reverse=True)


def test_uniform_boundedness(quartic_basis):
    sups = [np.max(np.abs(quartic_basis.mode(n))) for n in range(1, 61)]
    assert max(sups) < 2.0 * sups[0]


def test_low_modes_rejected_without_fallback():
    # Push the admissibility threshold above the ground state by widening
    # the blended core.
    spec = PotentialSpec(ell=2.0, c0=1.0, R0=2.0)
    from qpkam.spectrum import Grid, solve_spectrum

    basis = solve_spectrum(spec, Grid(L=8.0, n_pts=8001), 4)
    with pytest.raises(UnsupportedIndexError):
        build_frame(spec, basis, 1)
