"""Assembly, one iteration step, the full run, and frequency filtering."""

import math

import numpy as np
import pytest

from qpkam.errors import ConfigError, DivergenceError, ValidationError
from qpkam.homological import NormalForm
from qpkam.kam import (
    IterationSchedule,
    TrigPerturbation,
    assemble_problem,
    diophantine_margin,
    initial_state,
    kam_step,
    melnikov_screen,
    partial_transform,
    reducibility_residual,
    resonance_filter,
    run_iteration,
)
from qpkam.matrices import QPMatrix, TorusFunction, strip_norm

BETA = 5.0 / 42.0
GOLDEN = 0.5 * (1.0 + math.sqrt(5.0))
NU = 0.7


def _zero_w():
    return TrigPerturbation(n_freq=1, K_phi=8)


def test_assemble_zero_perturbation(quartic_basis):
    a0, p0, rep = assemble_problem(
        quartic_basis, _zero_w(), NU, 1.0, 1e-3, 12, 8
    )
    assert strip_norm(p0, beta=BETA, s=0.5) == 0.0
    assert rep["beta_norm"] == 0.0
    assert len(a0.lambdas) == 12


def test_assemble_standard_perturbation(quartic_basis, w_standard):
    a0, p0, rep = assemble_problem(
        quartic_basis, w_standard, NU, 1.0, 1e-3, 30, 8
    )
    assert 0.0 < rep["beta_norm"] < math.inf
    assert rep["hermitian_defect"] <= 1e-9
    assert rep["unbounded_surrogate"] > 0.0
    assert rep["delta"] == pytest.approx(2.0 / 3.0, abs=1e-15)
    # Modes come in conjugate pairs from cos(phi).
    assert set(p0.coeffs) == {(1,), (-1,)}


def test_assemble_rejects_even_component(quartic_basis):
    cos_phi = TorusFunction(n_freq=1, K_phi=8, coeffs={(1,): 0.5, (-1,): 0.5})
    w_even = TrigPerturbation(n_freq=1, K_phi=8, coss={1: cos_phi})
    with pytest.raises(ValidationError) as exc:
        assemble_problem(quartic_basis, w_even, NU, 1.0, 1e-3, 12, 8)
    assert exc.value.detail.get("code") == "oddness-violation"


def test_diophantine_margin_positive():
    margin, worst = diophantine_margin((NU,))
    assert margin > 0.0
    assert worst != (0,)


def test_schedule_recurrences():
    sched = IterationSchedule(eps0=1e-3, s0=0.5, gamma0=0.05, l_max=4)
    rows = sched.levels()
    assert rows[0]["eps"] == pytest.approx(1e-4, rel=1e-12)
    assert rows[1]["eps"] == pytest.approx(10.0 ** (-16.0 / 3.0), rel=1e-12)
    for prev, row in zip(rows, rows[1:]):
        assert row["eps"] == pytest.approx(prev["eps"] ** (4.0 / 3.0), rel=1e-12)
        assert row["s"] == pytest.approx(prev["s"] - 2.0 * row["sigma"], rel=1e-12)
        assert row["K"] == row["l"] * sched.K_base
    assert sched.width_budget_ok()


def test_schedule_gates():
    with pytest.raises(ConfigError):
        IterationSchedule(eps0=1e-3, s0=1.5, gamma0=0.05)
    with pytest.raises(ConfigError):
        IterationSchedule(eps0=1e-3, s0=0.5, gamma0=-1.0)
    with pytest.raises(ConfigError):
        IterationSchedule(eps0=1e-3, s0=0.5, gamma0=0.05, stop_tol=0.0)


def _random_problem(rng, n_states, eps, k_phi=8, k_act=1):
    lams = np.sort(rng.uniform(1.0, 4.0 + 2.0 * n_states, size=n_states))
    lams += np.arange(n_states) * 0.3  # keep gaps honest
    zero = TorusFunction(1, k_phi, {})
    nf = NormalForm(lambdas=tuple(float(x) for x in lams), mus=(zero,) * n_states)
    coeffs = {}
    for l in range(1, k_act + 1):
        blk = rng.normal(size=(n_states, n_states)) + 1j * rng.normal(
            size=(n_states, n_states)
        )
        coeffs[(l,)] = blk
        coeffs[(-l,)] = blk.conj().T
    h = rng.normal(size=(n_states, n_states))
    coeffs[(0,)] = (h + h.T).astype(complex)
    p_raw = QPMatrix(n_freq=1, K_phi=k_phi, N=n_states, coeffs=coeffs)
    scale = eps / strip_norm(p_raw, beta=BETA, s=0.5)
    return nf, scale * p_raw


def test_step_trivial_and_diagonal_absorption():
    zero = TorusFunction(1, 8, {})
    nf = NormalForm(lambdas=(1.0, 3.0, 6.2), mus=(zero,) * 3)
    sched = IterationSchedule(eps0=1e-3, s0=0.5, gamma0=0.05)
    p = QPMatrix(n_freq=1, K_phi=8, N=3)
    state = initial_state(nf, p, (GOLDEN,), sched, c_lambda=1.0)
    nxt, info = kam_step(state, 0.05)
    assert nxt.level == 1
    assert nxt.lambdas == state.lambdas
    assert strip_norm(nxt.P, beta=BETA, s=nxt.s) == 0.0

    d = np.diag([0.5, -0.25, 0.125]).astype(complex)
    state_d = initial_state(
        nf, QPMatrix(n_freq=1, K_phi=8, N=3, coeffs={(0,): d}), (GOLDEN,), sched, 1.0
    )
    nxt_d, _ = kam_step(state_d, 0.05)
    assert nxt_d.lambdas == pytest.approx((1.5, 2.75, 6.325), rel=1e-13)
    assert all(m.majorant() == 0.0 for m in nxt_d.mus)
    assert strip_norm(nxt_d.P, beta=BETA, s=nxt_d.s) < 1e-15


def test_step_quadratic_contraction():
    rng = np.random.default_rng(2024)
    nf, p = _random_problem(rng, 20, 1e-3)
    sched = IterationSchedule(eps0=2e-3, s0=0.5, gamma0=0.05)
    state = initial_state(nf, p, (GOLDEN,), sched, c_lambda=1.0)
    nxt, info = kam_step(state, sched.levels()[0]["sigma"])

    n0 = strip_norm(p, beta=BETA, s=state.s)
    n1 = strip_norm(nxt.P, beta=BETA, s=nxt.s)
    assert n1 <= 10.0 * n0**2  # quadratic with a desk-scale constant
    assert n1 / n0 ** (4.0 / 3.0) <= 1.0
    assert nxt.P.hermitian_defect() <= 1e-12

    # Diagonal absorption bounds the eigenvalue drift entrywise.
    drift = np.abs(np.array(nxt.lambdas) - np.array(state.lambdas))
    idx = np.arange(1, 21, dtype=float)
    assert np.all(drift <= n0 * idx ** (2.0 * BETA) * (1.0 + 1e-9))
    # Every updated oscillating diagonal keeps zero average.
    assert all(abs(m.mean) == 0.0 for m in nxt.mus)


def test_step_cross_check_integral_form():
    from qpkam.kam import step_cross_check

    rng = np.random.default_rng(77)
    nf, p = _random_problem(rng, 8, 1e-3)
    sched = IterationSchedule(eps0=2e-3, s0=0.5, gamma0=0.05)
    state = initial_state(nf, p, (GOLDEN,), sched, c_lambda=1.0)
    from qpkam.homological import solve_generator

    b, _ = solve_generator(nf, p, (GOLDEN,), s=state.s)
    nxt, _ = kam_step(state, 0.05)
    rep = step_cross_check(state, b, nxt.P)
    assert rep["deviation_max"] <= 1e-10 * rep["scale"]


def test_run_zero_perturbation(quartic_basis):
    a0, p0, _ = assemble_problem(quartic_basis, _zero_w(), NU, 1.0, 0.0, 10, 8)
    sched = IterationSchedule(eps0=1e-3, s0=0.5, gamma0=0.05, l_max=6)
    res = run_iteration(a0, p0, (GOLDEN,), sched)
    assert res.converged
    assert res.lambdas_inf == a0.lambdas
    assert res.u_deviation == 0.0
    assert reducibility_residual(res, a0, p0, (GOLDEN,)) == 0.0


def test_run_superexponential_levels(quartic_basis, w_standard):
    a0, p0, _ = assemble_problem(quartic_basis, w_standard, NU, 1.0, 1e-3, 12, 8)
    sched = IterationSchedule(
        eps0=5e-3, s0=0.5, gamma0=0.05, l_max=8, stop_tol=1e-12
    )
    res = run_iteration(a0, p0, (GOLDEN,), sched)
    assert res.converged
    norms = [row["norm_Pl"] for row in res.levels if row["norm_Pl"] > 0.0]
    logs = np.log(norms)
    slopes = np.diff(logs)
    assert np.all(slopes < 0.0)
    # Superexponential: consecutive log-slopes steepen.
    for s_prev, s_next in zip(slopes, slopes[1:]):
        assert s_next / s_prev >= 1.25

    # Unitarity of the assembled transform at sampled angles.
    assert res.unitarity_defect <= 1e-8
    resid = reducibility_residual(res, a0, p0, (GOLDEN,))
    assert resid <= 1e-8


def test_run_divergence_reported():
    zero = TorusFunction(1, 6, {})
    nf = NormalForm(lambdas=(1.0, 3.0), mus=(zero, zero))
    blk = np.array([[0.0, 4.0], [4.0, 0.0]], dtype=complex)
    p = QPMatrix(n_freq=1, K_phi=6, N=2, coeffs={(0,): blk})
    sched = IterationSchedule(eps0=0.5, s0=0.5, gamma0=1e-4, l_max=8)
    with pytest.raises(DivergenceError):
        run_iteration(nf, p, (0.618,), sched)


def test_melnikov_screen_certificate(quartic_basis):
    lams = tuple(float(x) for x in quartic_basis.lambdas[:2])
    gap = lams[1] - lams[0]
    ok, cert = melnikov_screen(lams, (gap / 2.0,), 0.01, 7.5, 4.0 / 3.0, 4, 1)
    assert not ok
    assert cert["family"] == "second"
    assert cert["k"] == (-2,)
    assert {cert["i"], cert["j"]} == {1, 2}

    ok2, cert2 = melnikov_screen(lams, (GOLDEN,), 0.01, 7.5, 4.0 / 3.0, 4, 1)
    assert ok2 and cert2 is None


def test_partial_transform_tracks_uneliminated_tail(quartic_basis, w_standard):
    a0, p0, _ = assemble_problem(quartic_basis, w_standard, NU, 1.0, 1e-3, 12, 8)
    sched = IterationSchedule(
        eps0=5e-3, s0=0.5, gamma0=0.05, l_max=8, stop_tol=1e-12
    )
    res = run_iteration(a0, p0, (GOLDEN,), sched)
    assert len(res.levels) >= 2
    u1 = partial_transform(res.final.history, 1, p0.K_phi, p0.N, up_to=1)
    resid_1 = reducibility_residual(res, a0, p0, (GOLDEN,), u_total=u1)
    p1_norm = res.levels[1]["norm_Pl"]
    assert 0.01 <= resid_1 / p1_norm <= 10.0


def test_filter_trivial_gamma_zero():
    out = resonance_filter((1.0, 2.0), np.linspace(0.1, 4.0, 2001), 0.0, 3.0, 3, 3.0)
    assert out["excluded_fraction"] == 0.0


def test_filter_small_instance_matches_interval_oracle():
    """Brute-force oracle: exclude each omega by scanning (i, j, k) directly."""
    lams = (1.0, 2.0)
    grid = np.linspace(0.1, 4.0, 20001)
    gamma, tau, k_max, iota = 0.05, 3.0, 3, 3.0
    out = resonance_filter(lams, grid, gamma, tau, k_max, iota)

    excluded = np.zeros(grid.size, dtype=bool)
    for k in range(-k_max, k_max + 1):
        if k != 0:
            excluded |= np.abs(k * grid) < gamma / abs(k) ** tau
        for i in (1, 2):
            for j in (1, 2):
                if i == j:
                    continue
                gap = lams[i - 1] - lams[j - 1]
                thr = gamma * abs(i**iota - j**iota) / (1.0 + abs(k) ** tau)
                excluded |= np.abs(gap + k * grid) < thr
    assert out["excluded_fraction"] == pytest.approx(
        np.mean(excluded), abs=1e-12
    )
    assert np.array_equal(out["accepted"], grid[~excluded])
    assert out["excluded_fraction"] == pytest.approx(0.10179491025448728, rel=1e-12)


def test_filter_linear_in_gamma():
    lams = (1.0, 2.0, 3.3, 4.9)
    grid = np.linspace(0.0, 1.0, 40001)
    f_big = resonance_filter(lams, grid, 0.02, 7.5, 10, 4.0 / 3.0)
    f_half = resonance_filter(lams, grid, 0.01, 7.5, 10, 4.0 / 3.0)
    ratio = f_big["excluded_fraction"] / f_half["excluded_fraction"]
    assert 1.4 <= ratio <= 2.6


def test_filter_tau_domain():
    with pytest.raises(ValidationError):
        resonance_filter((1.0, 2.0), np.linspace(0.0, 1.0, 101), 0.05, 2.0, 5, 4.0 / 3.0)
