"""Even polynomial-type confining potentials V(x) = |x|^{2l} (c0 + w(x)).

Outside a trust radius R0 the potential is the asymptotic form with
w(x) = sum_j c_j / |x|^{2j}; inside, a C^3 even polynomial blend replaces it
so V is defined (and nonnegative) on the whole line. The class knows its
threshold radius R, beyond which V(x) <= x V'(x) and V is the largest value
seen so far, and inverts V there to give turning points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    NoTurningPointError,
    UnsupportedDerivativeError,
    ValidationError,
)

_INNER_DEG = 4  # blend is q0 + q1 x^2 + q2 x^4 + q3 x^6 (+ x^8 when needed)


def _outer_terms(ell: float, c0: float, w_coeffs: tuple[float, ...]):
    """(coefficient, power) pairs of the asymptotic polynomial in |x|."""
    terms = [(c0, 2.0 * ell)]
    terms += [(cj, 2.0 * ell - 2.0 * (j + 1)) for j, cj in enumerate(w_coeffs)]
    return terms


def _poly_eval(terms, y, order):
    out = np.zeros_like(y, dtype=float)
    for coef, power in terms:
        p = power
        c = coef
        for _ in range(order):
            c *= p
            p -= 1.0
        if c != 0.0:
            out += c * np.power(y, p, where=(y > 0) | (p >= 0),
                                out=np.zeros_like(y))
    return out


@dataclass(frozen=True)
class PotentialSpec:
    """Immutable description of one potential.

    ell: growth exponent (> 1), V ~ |x|^{2 ell} at infinity.
    c0: leading coefficient (> 0).
    w_coeffs: (c_1, c_2, ...) of the inverse-square correction series.
    R0: radius beyond which the asymptotic form is trusted.
    inner: even-polynomial blend coefficients on [-R0, R0], filled in
        automatically to match V and three derivatives at R0.
    """

    ell: float
    c0: float
    w_coeffs: tuple[float, ...] = ()
    R0: float = 1.0
    inner: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.ell > 1.0:
            raise ValidationError("ell must exceed 1", ell=self.ell)
        if not self.c0 > 0.0:
            raise ValidationError("c0 must be positive", c0=self.c0)
        if not self.R0 > 0.0:
            raise ValidationError("R0 must be positive", R0=self.R0)
        object.__setattr__(self, "w_coeffs", tuple(float(c) for c in self.w_coeffs))
        if not self.inner:
            object.__setattr__(self, "inner", self._solve_inner())
        else:
            object.__setattr__(self, "inner", tuple(float(q) for q in self.inner))
        self._check_inner_nonnegative()

    def _solve_inner(self) -> tuple[float, ...]:
        # Match value and first three derivatives of the outer form at R0
        # with an even polynomial q(x) = sum_k q_k x^{2k}, k = 0.._INNER_DEG-1.
        terms = _outer_terms(self.ell, self.c0, self.w_coeffs)
        r = self.R0
        rhs = np.array([float(_poly_eval(terms, np.asarray(r), m)) for m in range(4)])
        mat = np.zeros((4, _INNER_DEG))
        for k in range(_INNER_DEG):
            for m in range(4):
                p = 2 * k
                c = 1.0
                for _ in range(m):
                    c *= p
                    p -= 1
                mat[m, k] = c * r**p if c else 0.0
        q = np.linalg.solve(mat, rhs)
        return tuple(q)

    def _check_inner_nonnegative(self):
        xs = np.linspace(0.0, self.R0, 257)
        vals = self._eval_inner(xs, 0)
        if vals.min() < 0.0:
            raise ValidationError(
                "inner blend dips negative; adjust R0 or w_coeffs",
                x=float(xs[vals.argmin()]), value=float(vals.min()),
            )

    def _eval_inner(self, y, order):
        out = np.zeros_like(y, dtype=float)
        for k, qk in enumerate(self.inner):
            p = 2 * k
            c = qk
            for _ in range(order):
                c *= p
                p -= 1
            if c != 0.0:
                out += c * y ** max(p, 0) * (0.0 if p < 0 else 1.0)
        return out

    # -- serialization ----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "ell": self.ell,
            "c0": self.c0,
            "w": list(self.w_coeffs),
            "R0": self.R0,
            "inner": list(self.inner),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PotentialSpec":
        return cls(
            ell=float(doc["ell"]),
            c0=float(doc["c0"]),
            w_coeffs=tuple(doc.get("w", ())),
            R0=float(doc.get("R0", 1.0)),
            inner=tuple(doc.get("inner", ())),
        )


def eval(spec: PotentialSpec, x, order: int = 0):
    """V^(order)(x) for order in 0..3; works on scalars and arrays.

    Even orders are even in x, odd orders odd, enforced through evaluation
    at |x| and an explicit sign factor.
    """
    if not isinstance(order, (int, np.integer)) or order < 0 or order > 3:
        raise UnsupportedDerivativeError("order must be an integer in 0..3",
                                         order=order)
    x_arr = np.asarray(x, dtype=float)
    y = np.abs(x_arr)
    outer = y >= spec.R0
    terms = _outer_terms(spec.ell, spec.c0, spec.w_coeffs)
    vals = np.where(outer, _poly_eval(terms, y, order),
                    spec._eval_inner(y, order))
    if order % 2 == 1:
        vals = vals * np.sign(x_arr)
    if np.isscalar(x) or x_arr.ndim == 0:
        return float(vals)
    return vals


@lru_cache(maxsize=None)
def scaling_radius(spec: PotentialSpec, search_limit: float = 1e6) -> float:
    """Smallest x >= R0 with V'(x) >= V(R0)/R0 (the scaling-law radius)."""
    target = eval(spec, spec.R0, 0) / spec.R0
    if eval(spec, spec.R0, 1) >= target:
        return spec.R0
    lo, hi = spec.R0, 2.0 * spec.R0
    while eval(spec, hi, 1) < target:
        lo, hi = hi, 2.0 * hi
        if hi > search_limit:
            raise ValidationError("V' never reaches V(R0)/R0", limit=search_limit)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if eval(spec, mid, 1) >= target:
            hi = mid
        else:
            lo = mid
    return hi


@lru_cache(maxsize=None)
def threshold_radius(spec: PotentialSpec, scan_points: int = 2001) -> float:
    """Radius R beyond which the turning-point machinery is trusted.

    Scans outward from 2 * scaling_radius for the smallest grid point R with
    V(x) <= x V'(x) on [R/2, R] and V strictly below V(R) on [0, R).
    """
    start = 2.0 * scaling_radius(spec)
    for mult in (1.0, 1.5, 2.0, 3.0, 5.0, 8.0):
        r = start * mult
        xs = np.linspace(r / 2.0, r, scan_points)
        if np.any(eval(spec, xs, 0) > xs * eval(spec, xs, 1) + 1e-12):
            continue
        inside = np.linspace(0.0, r, scan_points, endpoint=False)
        if np.any(eval(spec, inside, 0) >= eval(spec, r, 0)):
            continue
        return r
    raise ValidationError("no threshold radius found up to 8x the scaling radius")


def verify_assumptions(spec: PotentialSpec, grid) -> dict:
    """Fit the growth/shape constants on a grid with |x| >= R0.

    Returns {C1_fit, D1_fit, D2_fit, convexity_ok, scaling_ok}. Raises
    ValidationError naming the failing point if convexity, positivity, or
    the two-sided scaling law fails.
    """
    xs = np.sort(np.abs(np.asarray(grid, dtype=float)))
    if xs.size == 0:
        raise ValidationError("empty grid")
    if xs[0] < spec.R0:
        raise ValidationError("grid must satisfy |x| >= R0", x=float(xs[0]))

    v = eval(spec, xs, 0)
    if v.min() < 0.0:
        i = int(v.argmin())
        raise ValidationError("V negative", item="nonnegativity",
                              x=float(xs[i]), value=float(v[i]))
    d2 = eval(spec, xs, 2)
    if d2.min() < 0.0:
        i = int(d2.argmin())
        raise ValidationError("V'' negative beyond R0", item="convexity",
                              x=float(xs[i]), value=float(d2[i]))

    c1 = 0.0
    prev = v
    for j in (1, 2, 3):
        cur = eval(spec, xs, j)
        mask = np.abs(prev) > 0.0
        if mask.any():
            c1 = max(c1, float(np.max(np.abs(xs[mask] * cur[mask])
                                      / np.abs(prev[mask]))))
        prev = cur

    growth = v / xs ** (2.0 * spec.ell)
    d1_fit, d2_fit = float(growth.min()), float(growth.max())

    r_tilde = scaling_radius(spec)
    for theta in (0.5, 0.75):
        sel = xs * theta >= r_tilde
        if not sel.any():
            continue
        xt = xs[sel]
        v_x, v_tx = eval(spec, xt, 0), eval(spec, theta * xt, 0)
        low = theta**c1 * v_x
        high = theta * v_x
        bad = (v_tx < low - 1e-12 * np.abs(low)) | (v_tx > high + 1e-12 * high)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError("scaling law violated", item="scaling",
                                  theta=theta, x=float(xt[i]),
                                  value=float(v_tx[i]),
                                  bounds=(float(low[i]), float(high[i])))

    return {
        "C1_fit": c1,
        "D1_fit": d1_fit,
        "D2_fit": d2_fit,
        "convexity_ok": True,
        "scaling_ok": True,
    }


def turning_point(spec: PotentialSpec, lam: float,
                  threshold: float | None = None) -> float:
    """The radius X >= R/2 with V(X) = lam, to 1e-12 relative.

    Bracketed bisection down to a narrow interval, then Newton polish.
    Raises NoTurningPointError when lam < V(R).
    """
    r = threshold_radius(spec) if threshold is None else threshold
    v_r = eval(spec, r, 0)
    if lam < v_r:
        raise NoTurningPointError(
            "energy below V at the threshold radius; convention X = R applies",
            lam=lam, V_R=v_r, R=r,
        )
    lo, hi = r / 2.0, r
    while eval(spec, hi, 0) < lam:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise NoTurningPointError("V never reaches lam", lam=lam)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if eval(spec, mid, 0) < lam:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(8):
        f = eval(spec, x, 0) - lam
        df = eval(spec, x, 1)
        step = f / df
        x -= step
        if abs(step) <= 1e-15 * abs(x):
            break
    return float(x)
