"""Direct propagation versus the conjugated diagonal flow."""

import math

import numpy as np
import pytest

from qpkam.dynamics import (
    compare_flows,
    evolve_direct,
    evolve_reduced,
    reduced_initial,
    sobolev_norm,
)
from qpkam.errors import ResonanceError, StepSizeError, ValidationError
from qpkam.homological import NormalForm
from qpkam.kam import IterationSchedule, assemble_problem, run_iteration
from qpkam.matrices import QPMatrix, TorusFunction, qp_identity

GOLDEN = 0.5 * (1.0 + math.sqrt(5.0))


def _diag_form(lams, k=4):
    zero = TorusFunction(1, k, {})
    return NormalForm(lambdas=tuple(lams), mus=(zero,) * len(lams))


def _basis_state(n, j=0):
    x0 = np.zeros(n, dtype=complex)
    x0[j] = 1.0
    return x0


def test_free_flow_is_diagonal_phases():
    nf = _diag_form((1.0, 2.5, 6.0))
    p = QPMatrix(1, 4, 3)
    x0 = np.full(3, 1.0 / math.sqrt(3.0), dtype=complex)
    tr = evolve_direct(nf, p, 0.0, (GOLDEN,), x0, 30.0, samples=400)
    expected = np.exp(-1j * np.outer(tr.times, np.array(nf.lambdas))) * x0
    assert np.max(np.abs(tr.states - expected)) < 1e-8


def test_constant_coupling_matches_dense_exponential():
    from scipy.linalg import expm

    nf = _diag_form((1.0, 3.2))
    blk = np.array([[0.2, 0.5 - 0.1j], [0.5 + 0.1j, -0.4]], dtype=complex)
    p = QPMatrix(1, 4, 2, {(0,): blk})
    x0 = np.array([0.8, 0.6], dtype=complex)
    eps = 0.3
    tr = evolve_direct(nf, p, eps, (GOLDEN,), x0, 20.0, samples=200)
    gen = np.diag(nf.lambdas).astype(complex) + eps * blk
    for i in (50, 120, 199):
        dense = expm(-1j * gen * tr.times[i]) @ x0
        assert np.max(np.abs(tr.states[i] - dense)) < 1e-8


def test_norm_conservation_and_drift_report():
    nf = _diag_form((1.0, 3.2, 5.5))
    rng = np.random.default_rng(1)
    h = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    blk = 0.5 * (h + h.conj().T)
    p = QPMatrix(1, 4, 3, {(1,): blk, (-1,): blk})
    x0 = _basis_state(3)
    tr = evolve_direct(nf, p, 0.1, (GOLDEN,), x0, 60.0, samples=600)
    norms = sobolev_norm(tr.states, 0.0)
    assert np.max(np.abs(norms - 1.0)) < 1e-6
    assert tr.norm_drift < 1e-6


def test_initial_state_must_be_normalized():
    nf = _diag_form((1.0, 2.0))
    with pytest.raises(ValidationError) as exc:
        evolve_direct(nf, QPMatrix(1, 4, 2), 0.0, (1.0,), np.array([1.0, 1.0]), 5.0)
    assert exc.value.detail.get("code") == "not-normalized"


def test_oversized_step_rejected():
    nf = _diag_form((40.0, 80.0))
    with pytest.raises(StepSizeError) as exc:
        evolve_direct(
            nf, QPMatrix(1, 4, 2), 0.0, (1.0,), _basis_state(2), 5.0, dt=0.05
        )
    assert exc.value.detail.get("code") == "step-too-large"


def test_norm_drift_error_suggests_step():
    nf = _diag_form((3.0, 7.0))
    blk = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
    p = QPMatrix(1, 4, 2, {(1,): 0.5 * blk, (-1,): 0.5 * blk})
    with pytest.raises(StepSizeError) as exc:
        evolve_direct(
            nf, p, 0.5, (GOLDEN,), _basis_state(2), 40.0, dt=0.012, drift_tol=1e-15
        )
    detail = exc.value.detail
    assert detail.get("code") == "norm-drift"
    assert 0.0 < detail["suggested_dt"] < 0.012


def test_reduced_flow_closed_forms():
    mus = (
        TorusFunction(1, 4, {}),
        TorusFunction(1, 4, {(1,): 0.2}),
    )
    y0 = np.full(2, 1.0 / math.sqrt(2.0), dtype=complex)
    omega = 1.3
    tr = evolve_reduced((1.0, 2.0), mus, (omega,), y0, 10.0, 101)
    phase0 = np.exp(-1j * 1.0 * tr.times) * y0[0]
    assert np.max(np.abs(tr.states[:, 0] - phase0)) < 1e-13
    phi = 0.2 * (np.exp(1j * omega * tr.times) - 1.0) / (1j * omega)
    phase1 = np.exp(-1j * (2.0 * tr.times + phi.real) + phi.imag * 0.0) * y0[1]
    expected1 = np.exp(-1j * 2.0 * tr.times - 1j * phi) * y0[1]
    del phase1
    assert np.max(np.abs(tr.states[:, 1] - expected1)) < 1e-13
    # Phase-only evolution preserves每 per-mode magnitude.
    assert np.max(np.abs(np.abs(tr.states) - np.abs(y0)[None, :])) < 1e-13


def test_reduced_flow_requires_zero_mean():
    mus = (TorusFunction(1, 4, {(0,): 0.3}),)
    with pytest.raises(ValidationError) as exc:
        evolve_reduced((1.0,), mus, (1.0,), np.array([1.0 + 0j]), 5.0, 11)
    assert exc.value.detail.get("code") == "not-zero-mean"


def test_reduced_flow_resonant_mode():
    mus = (TorusFunction(2, 4, {(1, -1): 0.1}),)
    with pytest.raises(ResonanceError):
        evolve_reduced((1.0,), mus, (1.0, 1.0), np.array([1.0 + 0j]), 5.0, 11)


def test_sobolev_norm_weights():
    e4 = np.zeros((1, 6), dtype=complex)
    e4[0, 3] = 1.0
    assert sobolev_norm(e4, 2.0)[0] == pytest.approx(4.0, rel=1e-14)
    assert sobolev_norm(e4, 0.0)[0] == pytest.approx(1.0, rel=1e-14)


def test_compare_flows_identity_conjugation():
    nf = _diag_form((1.0, 2.5, 6.0))
    p = QPMatrix(1, 4, 3)
    x0 = _basis_state(3, 1)
    direct = evolve_direct(nf, p, 0.0, (GOLDEN,), x0, 20.0, samples=300)
    u = qp_identity(1, 4, 3)
    reduced = evolve_reduced(
        nf.lambdas, nf.mus, (GOLDEN,), reduced_initial(u, x0), 20.0, direct.times
    )
    rep = compare_flows(direct, reduced, u, (GOLDEN,))
    assert rep["max_deviation"] < 1e-12


def test_compare_flows_rejects_mismatched_grids():
    nf = _diag_form((1.0, 2.0))
    p = QPMatrix(1, 4, 2)
    x0 = _basis_state(2)
    a = evolve_direct(nf, p, 0.0, (1.0,), x0, 10.0, samples=50)
    b = evolve_reduced(nf.lambdas, nf.mus, (1.0,), x0, 10.0, 60)
    with pytest.raises(ValidationError) as exc:
        compare_flows(a, b, qp_identity(1, 4, 2), (1.0,))
    assert exc.value.detail.get("code") == "grid-mismatch"


def test_time_reversal_round_trip():
    nf = _diag_form((1.0, 3.2, 5.5))
    rng = np.random.default_rng(9)
    h = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    blk = 0.5 * (h + h.conj().T)
    p = QPMatrix(1, 4, 3, {(1,): blk, (-1,): blk})
    x0 = _basis_state(3)
    T = 40.0
    fwd = evolve_direct(nf, p, 0.2, (GOLDEN,), x0, T, samples=200)
    x_end = fwd.states[-1] / np.linalg.norm(fwd.states[-1])
    back = evolve_direct(nf, p, 0.2, (GOLDEN,), x_end, 0.0, t0=T, samples=200)
    tol = 2.0 * max(fwd.norm_drift, back.norm_drift, 1e-12)
    assert np.max(np.abs(back.states[-1] - x0)) <= 2.0 * tol + 1e-9


def test_end_to_end_reduction_tracks_direct_flow(quartic_basis, w_standard):
    """Converged transform reproduces the direct flow over 1000 periods."""
    a0, p0, _ = assemble_problem(quartic_basis, w_standard, 0.7, 1.0, 1e-3, 8, 8)
    sched = IterationSchedule(
        eps0=5e-3, s0=0.5, gamma0=0.05, l_max=8, stop_tol=1e-10
    )
    res = run_iteration(a0, p0, (GOLDEN,), sched)
    assert res.converged

    T = 1000.0 * 2.0 * math.pi / GOLDEN
    x0 = _basis_state(8)
    direct = evolve_direct(a0, p0, 1.0, (GOLDEN,), x0, T, samples=1200)
    y0 = reduced_initial(res.U_total, x0)
    reduced = evolve_reduced(
        res.lambdas_inf, res.mus_inf, (GOLDEN,), y0, T, direct.times
    )
    rep = compare_flows(direct, reduced, res.U_total, (GOLDEN,))
    assert rep["max_deviation"] <= 1e-5
    for s, ratio in rep["sobolev_report"].items():
        assert ratio <= 1.0 + 10.0 * 1e-3 ** (2.0 / 3.0)
