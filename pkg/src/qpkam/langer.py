"""Uniform turning-point approximation of high eigenfunctions.

Away from the classical turning point ``X_n`` (where ``V(X_n) = lambda_n``)
the eigenfunctions of ``-d^2/dx^2 + V`` are captured by a single closed-form
expression built from the phase integral of ``sqrt(lambda - V)`` and the
Hankel function of order one third.  This module provides the Hankel
evaluator on the two rays the construction needs, the phase integral with
its square-root turning-point singularity removed, and the assembled
approximant together with the envelope constants used to certify it.

Conventions: the phase variable is negative real on the oscillatory side
(argument ``-pi``) and positive imaginary on the decaying side.  With that
choice the approximant is real up to one global phase, which the
normalization constant absorbs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    BranchError,
    DegenerateFitError,
    NoTurningPointError,
    RayDomainError,
    UnsupportedIndexError,
)
from .potential import PotentialSpec, eval as potential_eval, turning_point
from .spectrum import SpectralBasis

NU = 1.0 / 3.0

# Switch radii between the ascending and large-argument regimes.  Both are
# validated by an overlap test (two regimes agree to < 1e-9 at the switch):
# the asymptotic series bottoms out near e^{-2|z|} and the ascending route
# loses digits to cancellation as |z| grows, so the windows below are where
# the two accuracy envelopes cross with margin.
SWITCH_NEGATIVE_RAY = 12.0
SWITCH_IMAG_RAY = 15.0

_SERIES_TERMS = 140
_ASYMPTOTIC_TERMS = 16


def _asymptotic_coeffs(nu: float, count: int) -> np.ndarray:
    """Hankel asymptotic coefficients a_k(nu), a_0 = 1."""
    a = np.empty(count)
    a[0] = 1.0
    fournu2 = 4.0 * nu * nu
    for k in range(1, count):
        a[k] = a[k - 1] * (fournu2 - (2 * k - 1) ** 2) / (8.0 * k)
    return a


_A13 = _asymptotic_coeffs(NU, _ASYMPTOTIC_TERMS)


def _bessel_j_series(nu: float, r: np.ndarray) -> np.ndarray:
    """Ascending series of J_nu on positive real arguments."""
    r = np.asarray(r, dtype=float)
    q = 0.25 * r * r
    term = (0.5 * r) ** nu / math.gamma(1.0 + nu)
    total = term.copy()
    for m in range(1, _SERIES_TERMS):
        term = term * (-q) / (m * (m + nu))
        total += term
        if np.all(np.abs(term) <= 1e-18 * np.abs(total)):
            break
    return total


def _bessel_j_asymptotic(nu: float, r: np.ndarray) -> np.ndarray:
    """Large-argument cosine expansion of J_nu, optimally truncated."""
    r = np.asarray(r, dtype=float)
    a = _asymptotic_coeffs(nu, _ASYMPTOTIC_TERMS)
    p = np.zeros_like(r)
    q = np.zeros_like(r)
    for k in range(_ASYMPTOTIC_TERMS):
        term = a[k] * r ** (-float(k))
        sign = -1.0 if (k // 2) % 2 else 1.0
        if k % 2 == 0:
            p += sign * term
        else:
            q += sign * term
    omega = r - 0.5 * nu * math.pi - 0.25 * math.pi
    return np.sqrt(2.0 / (math.pi * r)) * (np.cos(omega) * p - np.sin(omega) * q)


def _j_pair(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """J_{1/3}(r) and J_{-1/3}(r) on positive real r."""
    r = np.asarray(r, dtype=float)
    jp = np.empty_like(r)
    jm = np.empty_like(r)
    lo = r <= SWITCH_NEGATIVE_RAY
    if np.any(lo):
        jp[lo] = _bessel_j_series(NU, r[lo])
        jm[lo] = _bessel_j_series(-NU, r[lo])
    hi = ~lo
    if np.any(hi):
        jp[hi] = _bessel_j_asymptotic(NU, r[hi])
        jm[hi] = _bessel_j_asymptotic(-NU, r[hi])
    return jp, jm


@lru_cache(maxsize=8)
def _k_integral_nodes(t_max: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, t_max, count)
    w = np.full(count, t[1] - t[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return t, w


def _k13(y: np.ndarray) -> np.ndarray:
    """K_{1/3}(y) on positive real y.

    Uses the integral int_0^inf e^{-y cosh t} cosh(t/3) dt below the switch
    radius (free of the I_{-nu} - I_nu cancellation) and the decaying
    asymptotic series above it.
    """
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    lo = y <= SWITCH_IMAG_RAY
    if np.any(lo):
        ymin = float(np.min(y[lo]))
        t_max = math.log(45.0 / ymin) + 3.0 if ymin < 45.0 else 3.0
        t, w = _k_integral_nodes(round(t_max, 3), 400)
        integrand = np.exp(-np.outer(y[lo], np.cosh(t))) * np.cosh(NU * t)
        out[lo] = integrand @ w
    hi = ~lo
    if np.any(hi):
        yh = y[hi]
        total = np.zeros_like(yh)
        for k in range(_ASYMPTOTIC_TERMS):
            total += _A13[k] * yh ** (-float(k))
        out[hi] = np.sqrt(0.5 * math.pi / yh) * np.exp(-yh) * total
    return out


_SIN_NU_PI = math.sin(math.pi * NU)


def hankel1_third(z, branch: str = "principal"):
    """Evaluate H^(1)_{1/3} on the negative-real or positive-imaginary ray.

    Parameters
    ----------
    z : complex or array of complex
        Points to evaluate at.  Every entry must lie on (-inf, 0) or on
        (0, +i inf); anywhere else raises ``RayDomainError``.
    branch : {"principal", "lower"}
        On the negative ray the function is branched.  "principal" continues
        from above (argument +pi, the convention of standard libraries);
        "lower" continues from below (argument -pi, the convention under
        which the turning-point approximant is real).  On the imaginary ray
        the two coincide.

    Returns
    -------
    complex or ndarray of complex, matching the shape of ``z``.
    """
    if branch not in ("principal", "lower"):
        raise ValueError(f"unknown branch {branch!r}")
    zz = np.asarray(z, dtype=complex)
    scalar = zz.ndim == 0
    zz = np.atleast_1d(zz)
    out = np.empty(zz.shape, dtype=complex)

    neg = (zz.imag == 0.0) & (zz.real < 0.0)
    imag = (zz.real == 0.0) & (zz.imag > 0.0)
    bad = ~(neg | imag)
    if np.any(bad):
        raise RayDomainError(
            "argument off the supported rays (-inf,0) and (0,+i inf)",
            value=complex(zz[bad][0]),
        )

    if np.any(neg):
        r = -zz[neg].real
        jp, jm = _j_pair(r)
        if branch == "principal":
            # H1(r e^{i pi}) = e^{-i pi/3} (J_{-1/3} - e^{i pi/3} J_{1/3}) / (i sin(pi/3))
            rot = np.exp(-1j * math.pi * NU)
            val = rot * (jm - np.exp(1j * math.pi * NU) * jp) / (1j * _SIN_NU_PI)
        else:
            # H1(r e^{-i pi}) = e^{i pi/3} (J_{1/3} + J_{-1/3}) / (i sin(pi/3))
            val = np.exp(1j * math.pi * NU) * (jp + jm) / (1j * _SIN_NU_PI)
        out[neg] = val

    if np.any(imag):
        y = zz[imag].imag
        # H1_nu(i y) = (2 / (i pi)) e^{-i nu pi / 2} K_nu(y)
        out[imag] = (2.0 / (1j * math.pi)) * np.exp(-0.5j * math.pi * NU) * _k13(y)

    return complex(out[0]) if scalar else out


def prefactored_magnitude(z, branch: str = "principal"):
    """|sqrt(pi z / 2) H^(1)_{1/3}(z)| on the supported rays."""
    zz = np.asarray(z, dtype=complex)
    return np.abs(np.sqrt(math.pi * zz / 2.0) * hankel1_third(z, branch=branch))


@lru_cache(maxsize=4)
def _gl_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def phase_integral(spec: PotentialSpec, lam: float, X: float, x):
    """Phase variable zeta(x) for the turning point X at energy lam.

    Negative real for ``x < X`` (value ``-int_x^X sqrt(lam - V)``),
    positive imaginary for ``x > X`` (value ``i int_X^x sqrt(V - lam)``),
    zero at ``x = X``.  The square-root vanishing at the turning point is
    removed by integrating in ``u = sqrt(|t - X|)``, so ordinary
    Gauss-Legendre quadrature converges at full precision.

    Raises ``BranchError`` if ``lam - V`` changes sign strictly between
    ``x`` and ``X`` (the formula is only meaningful for the turning point
    adjacent to ``x``).
    """
    x_arr = np.asarray(x, dtype=float)
    scalar = x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr)
    out = np.zeros(x_arr.shape, dtype=complex)

    nodes, weights = _gl_nodes(64)
    u01 = 0.5 * (nodes + 1.0)
    w01 = 0.5 * weights

    for side, signcheck in ((x_arr < X, 1.0), (x_arr > X, -1.0)):
        if not np.any(side):
            continue
        xs = x_arr[side]
        span = np.sqrt(np.abs(X - xs))
        # t = X -+ u^2, u in [0, sqrt(|X - x|)]
        u = np.outer(span, u01)
        t = X - signcheck * u * u
        f = signcheck * (lam - potential_eval(spec, t))
        if np.any(f < -1e-12 * max(abs(lam), 1.0)):
            i_bad, j_bad = np.argwhere(f < -1e-12 * max(abs(lam), 1.0))[0]
            raise BranchError(
                "lam - V changes sign strictly between x and the turning point",
                x=float(xs[i_bad]),
                t=float(t[i_bad, j_bad]),
                X=float(X),
            )
        vals = 2.0 * ((u * np.sqrt(np.maximum(f, 0.0))) @ w01) * span
        out[side] = vals * (-1.0 if signcheck > 0 else 1j)

    return complex(out[0]) if scalar else out


@dataclass
class TurningPointFrame:
    """Geometry and certification data of one turning-point approximant."""

    n: int
    lam: float
    X: float
    window: float
    spec: PotentialSpec
    Cn: float = 0.0
    imag_residue: float = 0.0
    cn_scaled: float = 0.0
    zeta: np.ndarray = field(default=None, repr=False)
    mask: np.ndarray = field(default=None, repr=False)


def build_frame(
    spec: PotentialSpec,
    basis: SpectralBasis,
    n: int,
    allow_low: bool = False,
) -> TurningPointFrame:
    """Prepare the turning-point frame for mode ``n`` on the basis grid.

    The construction needs the energy to clear the potential's matching
    radius; below that (``lam_n < V(R)``) there is no outer turning point
    and the index is rejected with ``UnsupportedIndexError`` unless
    ``allow_low`` forces the documented fallback ``X = R``.
    """
    lam = basis.lambdas[n - 1]
    R = 2.0 * spec.R0
    v_at_r = float(potential_eval(spec, R))
    if lam < v_at_r:
        if not allow_low:
            raise UnsupportedIndexError(
                "energy below V at the matching radius; no outer turning point",
                n=n,
                lam=float(lam),
                V_R=v_at_r,
            )
        X = R
    else:
        try:
            X = turning_point(spec, float(lam))
        except NoTurningPointError:
            raise UnsupportedIndexError(
                "turning point not bracketed on the sampled domain",
                n=n,
                lam=float(lam),
            )
    window = X ** (-1.0 / 3.0)
    xg = basis.grid.x()
    xa = np.abs(xg)
    zeta = np.zeros(xg.shape, dtype=complex)
    below = xa < X
    above = xa > X
    zeta[below] = phase_integral(spec, float(lam), X, xa[below])
    zeta[above] = phase_integral(spec, float(lam), X, xa[above])
    mask = np.abs(xa - X) > window
    return TurningPointFrame(
        n=n, lam=float(lam), X=X, window=window, spec=spec, zeta=zeta, mask=mask
    )


def langer_eigenfunction(frame: TurningPointFrame, basis: SpectralBasis) -> np.ndarray:
    """Evaluate the turning-point approximant of mode ``frame.n`` on the grid.

    Returns the real-valued approximant, sign-aligned and norm-matched to
    the grid eigenfunction on the reliable region (turning window excluded);
    the normalization constant, its scale check against ``X^{(ell-1)/2}``
    and the residual imaginary part are recorded on the frame.
    """
    spec = frame.spec
    xg = basis.grid.x()
    xa = np.abs(xg)
    v = potential_eval(spec, xa)
    lam = frame.lam
    zeta = frame.zeta

    raw = np.zeros(xg.shape, dtype=complex)
    osc = zeta.real < 0.0
    dec = zeta.imag > 0.0
    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
        if np.any(osc):
            z = zeta[osc]
            amp = (lam - v[osc]) ** -0.25
            # sqrt on the lower branch: arg(zeta) = -pi, so sqrt is -i |.|^(1/2)
            pref = -1j * np.sqrt(0.5 * math.pi * (-z.real))
            raw[osc] = amp * pref * hankel1_third(z, branch="lower")
        if np.any(dec):
            z = zeta[dec]
            amp = (v[dec] - lam) ** -0.25 * np.exp(-0.25j * math.pi)
            raw[dec] = amp * np.sqrt(math.pi * z / 2.0) * hankel1_third(z)

    # one global phase makes the approximant real; remove it
    raw *= np.exp(2j * math.pi / 3.0)
    raw[~np.isfinite(raw)] = 0.0

    # parity extension: the construction used |x|
    par = basis.parity[frame.n - 1]
    if par == "odd":
        raw[xg < 0.0] *= -1.0
        raw[xg == 0.0] = 0.0

    mask = frame.mask
    h = basis.eigfuns[frame.n - 1]
    w = np.full(xg.shape, basis.grid.h)
    w[0] *= 0.5
    w[-1] *= 0.5
    norm_raw = math.sqrt(float(np.sum(w[mask] * np.abs(raw[mask]) ** 2)))
    norm_h = math.sqrt(float(np.sum(w[mask] * h[mask] ** 2)))
    scale = norm_h / norm_raw
    psi = raw * scale
    if float(np.sum(w[mask] * psi[mask].real * h[mask])) < 0.0:
        psi = -psi
        scale = -scale

    peak = float(np.max(np.abs(psi.real))) or 1.0
    frame.imag_residue = float(np.max(np.abs(psi.imag))) / peak
    frame.Cn = abs(scale)
    frame.cn_scaled = frame.Cn / frame.X ** (0.5 * (spec.ell - 1))
    return psi.real


def approximation_error(
    frame: TurningPointFrame, basis: SpectralBasis, psi: np.ndarray | None = None
) -> dict:
    """Deviation of the approximant from the grid eigenfunction.

    Both the sup metric (relative to the eigenfunction's peak) and the L2
    metric are computed over the reliable region only.
    """
    if psi is None:
        psi = langer_eigenfunction(frame, basis)
    h = basis.eigfuns[frame.n - 1]
    mask = frame.mask
    diff = np.abs(h[mask] - psi[mask])
    hinf = float(np.max(np.abs(h)))
    w = np.full(h.shape, basis.grid.h)
    w[0] *= 0.5
    w[-1] *= 0.5
    l2_diff = math.sqrt(float(np.sum(w[mask] * (h[mask] - psi[mask]) ** 2)))
    l2_h = math.sqrt(float(np.sum(w[mask] * h[mask] ** 2)))
    return {
        "n": frame.n,
        "X": frame.X,
        "e_sup": float(np.max(diff)) / hinf,
        "e_l2": l2_diff / l2_h,
    }


def turning_region_bounds(frame: TurningPointFrame, n_samples: int = 2000) -> dict:
    """Fit envelope constants for the potential gap and the phase variable.

    On ``x in [0, X) u (X, 2X]`` (turning window excluded) the ratios

        (lam - V) / (X^{2 ell - 1} (X - x))      -> [a1, a2]
        |zeta|    / (X^{ell - 1/2} |X - x|^{3/2}) -> [A1, A2]

    are scanned and their extreme values reported.  All four constants must
    come out positive and ordered; they are rescalable so the lower pair
    sits at or below 1, which the report records as ``normalizable``.
    """
    spec = frame.spec
    X = frame.X
    lam = frame.lam
    ell = spec.ell
    if frame.window >= X:
        raise DegenerateFitError(
            "turning window swallows the whole inner region", n=frame.n, X=X
        )
    xs = np.concatenate(
        [
            np.linspace(0.0, X - frame.window, n_samples // 2),
            np.linspace(X + frame.window, 2.0 * X, n_samples // 2),
        ]
    )
    gap = np.abs(lam - potential_eval(spec, xs))
    dist = np.abs(X - xs)
    keep = dist > 1e-9 * X
    ratio_gap = gap[keep] / (X ** (2 * ell - 1) * dist[keep])
    if ratio_gap.size < 8:
        raise DegenerateFitError("not enough sample points to fit envelopes")
    zeta_mag = np.abs(phase_integral(spec, lam, X, xs[keep]))
    ratio_zeta = zeta_mag / (X ** (ell - 0.5) * dist[keep] ** 1.5)
    a1, a2 = float(np.min(ratio_gap)), float(np.max(ratio_gap))
    A1, A2 = float(np.min(ratio_zeta)), float(np.max(ratio_zeta))
    return {
        "n": frame.n,
        "X": X,
        "a1": a1,
        "a2": a2,
        "A1": A1,
        "A2": A2,
        "normalizable": 0.0 < a1 <= a2 and 0.0 < A1 <= A2,
    }


def langer_scan(
    spec: PotentialSpec, basis: SpectralBasis, n_values
) -> list[dict]:
    """Per-mode report rows (errors and envelope constants) for a range of n."""
    rows = []
    for n in n_values:
        frame = build_frame(spec, basis, int(n))
        psi = langer_eigenfunction(frame, basis)
        err = approximation_error(frame, basis, psi)
        env = turning_region_bounds(frame)
        rows.append(
            {
                "n": int(n),
                "lam": frame.lam,
                "X": frame.X,
                "e_sup": err["e_sup"],
                "e_l2": err["e_l2"],
                "Cn": frame.Cn,
                "cn_scaled": frame.cn_scaled,
                "imag_residue": frame.imag_residue,
                "a1": env["a1"],
                "a2": env["a2"],
                "A1": env["A1"],
                "A2": env["A2"],
            }
        )
    return rows
