"""Dirichlet eigenpairs of -d^2/dx^2 + V(x) on a uniform grid.

Second-order three-point stencil; the symmetric tridiagonal eigenproblem is
solved by bisection + inverse iteration for the lowest J pairs. Eigenvectors
are trapezoid-normalized in L^2 and sign-fixed, and the basis carries enough
metadata for the boundary-tail and growth-law checks downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import beta as beta_fn

from . import potential
from .errors import DomainTooSmallError, TruncationError, ValidationError

TAIL_FRACTION = 0.05
TAIL_CEILING = 1e-8


@dataclass(frozen=True)
class Grid:
    """Uniform symmetric grid on [-L, L] with an odd point count."""

    L: float
    n_pts: int

    def __post_init__(self):
        if self.n_pts < 3 or self.n_pts % 2 == 0:
            raise ValidationError("n_pts must be odd and >= 3", n_pts=self.n_pts)
        if not self.L > 0:
            raise ValidationError("L must be positive", L=self.L)

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.n_pts - 1)

    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.n_pts)


@dataclass(frozen=True)
class SpectralBasis:
    """Ascending eigenpairs (lambdas[j], eigfuns[j]) with 1-based labels.

    eigfuns has shape (J, n_pts), trapezoid-normalized; parity[j] is "even"
    or "odd". Index origin is 1 in all public APIs: mode j lives at row j-1.
    """

    grid: Grid
    lambdas: np.ndarray
    eigfuns: np.ndarray
    parity: tuple[str, ...]

    @property
    def J(self) -> int:
        return len(self.lambdas)

    def mode(self, j: int) -> np.ndarray:
        if not 1 <= j <= self.J:
            raise ValidationError("mode index out of range", j=j, J=self.J)
        return self.eigfuns[j - 1]

    def overlap_matrix(self) -> np.ndarray:
        h = self.grid.h
        w = np.full(self.grid.n_pts, h)
        w[0] = w[-1] = h / 2.0
        return (self.eigfuns * w) @ self.eigfuns.T


def count_sign_changes(values: np.ndarray, rel_floor: float = 1e-6) -> int:
    v = values[np.abs(values) > rel_floor * np.abs(values).max()]
    return int(np.sum(np.sign(v[1:]) * np.sign(v[:-1]) < 0))


def _sign_fix(vec: np.ndarray, center: int) -> np.ndarray:
    tail = vec[center:]
    nz = np.nonzero(np.abs(tail) > 1e-8 * np.abs(vec).max())[0]
    anchor = tail[nz[0]] if nz.size else vec[np.abs(vec).argmax()]
    return -vec if anchor < 0 else vec


def solve_spectrum(spec: potential.PotentialSpec, grid: Grid, J: int) -> SpectralBasis:
    """Lowest J Dirichlet eigenpairs on the grid.

    Raises TruncationError when fewer than J eigenvalues sit below V(L)/2,
    and DomainTooSmallError when any eigenfunction fails the boundary-tail
    test (outer 5% of the grid must stay below 1e-8).
    """
    x = grid.x()
    h = grid.h
    v_interior = potential.eval(spec, x[1:-1], 0)
    d = 2.0 / h**2 + v_interior
    e = np.full(grid.n_pts - 3, -1.0 / h**2)
    lams, vecs = eigh_tridiagonal(d, e, select="i", select_range=(0, J - 1))

    v_wall = potential.eval(spec, grid.L, 0)
    if lams[-1] >= v_wall / 2.0:
        raise TruncationError(
            "fewer than J eigenvalues below V(L)/2; enlarge the domain",
            J=J, lambda_J=float(lams[-1]), V_L=float(v_wall),
            suggested_L=float(suggest_domain(spec, J)),
        )

    funs = np.zeros((J, grid.n_pts))
    funs[:, 1:-1] = vecs.T
    w = np.full(grid.n_pts, h)
    w[0] = w[-1] = h / 2.0
    norms = np.sqrt((funs**2 * w).sum(axis=1))
    funs /= norms[:, None]

    center = grid.n_pts // 2
    parity = []
    for row in range(J):
        funs[row] = _sign_fix(funs[row], center)
        rev = funs[row][::-1]
        even_res = np.abs(funs[row] - rev).max()
        odd_res = np.abs(funs[row] + rev).max()
        parity.append("even" if even_res <= odd_res else "odd")

    n_tail = max(1, int(TAIL_FRACTION * grid.n_pts))
    tail_mag = np.abs(np.concatenate([funs[:, :n_tail], funs[:, -n_tail:]], axis=1))
    worst = tail_mag.max(axis=1)
    if worst.max() >= TAIL_CEILING:
        j_bad = int(worst.argmax())
        raise DomainTooSmallError(
            "eigenfunction tail reaches the boundary region",
            j=j_bad + 1, tail=float(worst.max()),
            suggested_L=float(suggest_domain(spec, J)),
        )

    return SpectralBasis(grid=grid, lambdas=lams, eigfuns=funs,
                         parity=tuple(parity))


def weyl_fit(basis: SpectralBasis, j_range: tuple[int, int]) -> dict:
    """Log-log least-squares growth law over 1-based index window [j1, j2]."""
    j1, j2 = j_range
    if not (1 <= j1 < j2 <= basis.J) or j2 - j1 + 1 < 10:
        raise ValidationError("index window must lie in the basis and have"
                              " at least 10 points", j_range=j_range)
    js = np.arange(j1, j2 + 1, dtype=float)
    lams = basis.lambdas[j1 - 1:j2]
    slope, logc = np.polyfit(np.log(js), np.log(lams), 1)
    return {"exponent_fit": float(slope), "c_fit": float(np.exp(logc))}


def counting_estimate(spec: potential.PotentialSpec, energy: float) -> float:
    """Phase-space eigenvalue count below `energy` for the asymptotic form."""
    two_l = 2.0 * spec.ell
    x_turn = (energy / spec.c0) ** (1.0 / two_l)
    shape = beta_fn(1.0 / two_l, 1.5) / two_l
    return (2.0 / np.pi) * x_turn * np.sqrt(energy) * shape


def lambda_estimate(spec: potential.PotentialSpec, j: int) -> float:
    """Inverse of the counting estimate at count j - 1/2."""
    target = j - 0.5
    lo, hi = 1e-6, 1.0
    while counting_estimate(spec, hi) < target:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if counting_estimate(spec, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def suggest_domain(spec: potential.PotentialSpec, J: int,
                   safety: float = 4.0) -> float:
    """Half-width L with V(0.9 L) >= safety * (estimated lambda_J)."""
    lam_top = lambda_estimate(spec, J)
    x_need = potential.turning_point(spec, safety * lam_top)
    return x_need / 0.9


def refinement_ratio(spec: potential.PotentialSpec, grid: Grid, J: int) -> np.ndarray:
    """Richardson ratios (lam_h - lam_{h/2}) / (lam_{h/2} - lam_{h/4}).

    Second-order stencil puts these near 4; used as a consistency check.
    """
    lam = []
    for k in (1, 2, 4):
        g = Grid(L=grid.L, n_pts=(grid.n_pts - 1) * k + 1)
        x = g.x()
        d = 2.0 / g.h**2 + potential.eval(spec, x[1:-1], 0)
        e = np.full(g.n_pts - 3, -1.0 / g.h**2)
        lam.append(eigh_tridiagonal(d, e, select="i", select_range=(0, J - 1),
                                    eigvals_only=True))
    lam_h, lam_h2, lam_h4 = lam
    return (lam_h - lam_h2) / (lam_h2 - lam_h4)
