"""Eigenvalue solver and growth-law checks."""

import numpy as np
import pytest

from qpkam.potential import PotentialSpec
from qpkam.spectrum import (
    Grid,
    SpectralBasis,
    count_sign_changes,
    refinement_ratio,
    solve_spectrum,
    suggest_domain,
    weyl_fit,
)

# Frozen from a Richardson-extrapolated finite-difference oracle run at
# n_pts in {4001, 8001, 16001}, L = 8 (values are L-independent to ~1e-9).
QUARTIC_LOW = (1.060362090511, 3.799673031242, 7.455697938753)


def test_low_eigenvalues_quartic():
    spec = PotentialSpec(ell=2.0, c0=1.0, R0=0.5)
    basis = solve_spectrum(spec, Grid(L=8.0, n_pts=4001), 2)
    assert basis.lambdas[0] == pytest.approx(QUARTIC_LOW[0], abs=1e-4)
    assert basis.lambdas[1] == pytest.approx(QUARTIC_LOW[1], abs=1e-4)


def test_fine_basis_matches_oracle(quartic_basis):
    for j, lam in enumerate(QUARTIC_LOW):
        assert quartic_basis.lambdas[j] == pytest.approx(lam, abs=5e-7)


def test_parity_and_orthogonality(quartic_basis):
    assert quartic_basis.parity[0] == "even"
    assert quartic_basis.parity[1] == "odd"
    h = quartic_basis.grid.h
    w = np.full(quartic_basis.grid.n_pts, h)
    w[0] = w[-1] = h / 2.0
    inner = float(np.sum(w * quartic_basis.mode(1) * quartic_basis.mode(2)))
    assert abs(inner) < 1e-10


def test_simple_ascending(quartic_basis):
    gaps = np.diff(quartic_basis.lambdas)
    assert np.all(gaps > 0.0)


def test_overlap_matrix_orthonormal(quartic_basis):
    g = quartic_basis.overlap_matrix()
    assert np.max(np.abs(g - np.eye(quartic_basis.J))) < 1e-8


def test_sign_changes_count_modes(quartic_basis):
    for j in (1, 2, 5, 20, 41):
        assert count_sign_changes(quartic_basis.mode(j)) == j - 1


def test_growth_exponent_quartic(quartic_basis):
    fit = weyl_fit(quartic_basis, (20, 60))
    assert abs(fit["exponent_fit"] - 4.0 / 3.0) < 0.04


def test_growth_exponent_cubic():
    # A bare |x|^3 admits no nonnegative C^3 inner blend, so carry a small
    # positive low-order term; the growth exponent only sees the leading power.
    spec = PotentialSpec(ell=1.5, c0=1.0, w_coeffs=(0.5,), R0=0.5)
    L = suggest_domain(spec, 60)
    basis = solve_spectrum(spec, Grid(L=L, n_pts=32001), 60)
    fit = weyl_fit(basis, (20, 60))
    assert abs(fit["exponent_fit"] - 1.2) < 0.04


def test_flat_sequence_zero_exponent(quartic_basis):
    flat = SpectralBasis(
        grid=quartic_basis.grid,
        lambdas=np.full(15, 5.0),
        eigfuns=quartic_basis.eigfuns[:15],
        parity=quartic_basis.parity[:15],
    )
    fit = weyl_fit(flat, (1, 15))
    assert fit["exponent_fit"] == pytest.approx(0.0, abs=1e-12)


def test_refinement_ratio_second_order():
    spec = PotentialSpec(ell=2.0, c0=1.0, R0=0.5)
    ratios = refinement_ratio(spec, Grid(L=8.0, n_pts=2001), 6)
    assert np.all(ratios > 3.5) and np.all(ratios < 4.5)
