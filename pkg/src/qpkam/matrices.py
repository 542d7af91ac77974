"""Truncated matrix classes with index-weighted norms and their algebra.

Infinite matrices whose entries grow like (ij)^beta, organized as Fourier
series over a torus angle, are the state space of the reducibility
iteration.  Finite truncations keep two indices: the matrix dimension N
(modes 1..N, one-based to match the eigenvalue numbering) and the Fourier
cutoff K_phi.  Products are convolutions over the torus modes; the
exponential is computed by scaling and squaring inside the truncated
algebra.  All norms on the torus direction are weighted-l1 majorants of
the analytic sup over a complex strip, which upper-bound the sup norm and
are exactly computable on truncations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IterationLimitError, ValidationError

Mode = tuple[int, ...]


def _as_mode(l, n_freq: int) -> Mode:
    if isinstance(l, int):
        if n_freq != 1:
            raise ValidationError("scalar mode label needs n_freq=1", l=l)
        return (l,)
    t = tuple(int(v) for v in l)
    if len(t) != n_freq:
        raise ValidationError("mode label has wrong length", l=t, n_freq=n_freq)
    return t


def _neg(l: Mode) -> Mode:
    return tuple(-v for v in l)


def _mode_abs(l: Mode) -> int:
    return sum(abs(v) for v in l)


def mode_range(n_freq: int, K_phi: int):
    """All integer vectors l with |l|_inf <= K_phi, lexicographic."""
    return itertools.product(range(-K_phi, K_phi + 1), repeat=n_freq)


@dataclass(frozen=True)
class TruncatedMatrix:
    """N x N complex block with one-based index semantics."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=complex)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValidationError("entries must be square", shape=e.shape)
        if not np.all(np.isfinite(e)):
            raise ValidationError("entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    def get(self, i: int, j: int) -> complex:
        if not (1 <= i <= self.N and 1 <= j <= self.N):
            raise ValidationError("one-based index out of range", i=i, j=j, N=self.N)
        return complex(self.entries[i - 1, j - 1])


def _entries(A) -> np.ndarray:
    if isinstance(A, TruncatedMatrix):
        return A.entries
    return np.asarray(A, dtype=complex)


def norm_beta(A, beta: float) -> float:
    """sup over entries of |A_i^j| (ij)^(-beta), indices one-based."""
    if beta < 0:
        raise ValidationError("beta must be nonnegative", beta=beta)
    e = _entries(A)
    n = e.shape[0]
    if n == 0:
        return 0.0
    idx = np.arange(1, n + 1, dtype=float)
    w = np.outer(idx, idx) ** (-beta)
    return float(np.max(np.abs(e) * w))


def norm_beta_plus(A, beta: float, iota: float) -> float:
    """sup of |A_i^j| (ij)^(-beta) (1+|i-j|) (i^(iota-1)+j^(iota-1))."""
    if beta < 0 or iota <= 1.0:
        raise ValidationError("need beta >= 0 and iota > 1", beta=beta, iota=iota)
    e = _entries(A)
    n = e.shape[0]
    if n == 0:
        return 0.0
    idx = np.arange(1, n + 1, dtype=float)
    ij = np.outer(idx, idx) ** (-beta)
    gap = 1.0 + np.abs(idx[:, None] - idx[None, :])
    growth = idx[:, None] ** (iota - 1.0) + idx[None, :] ** (iota - 1.0)
    return float(np.max(np.abs(e) * ij * gap * growth))


def weighted_op_norm(
    A,
    source: float = 0.0,
    target: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 2000,
) -> float:
    """Operator norm of A : l^2_source -> l^2_target by power iteration.

    The weighted spaces carry ||xi||_s^2 = sum j^s |xi_j|^2, so the norm is
    the largest singular value of D_t^(1/2) A D_s^(-1/2) with D(j) = j^s.
    Deterministic start vector; converges to ``tol`` relative or raises.
    """
    e = _entries(A)
    n = e.shape[0]
    if n == 0:
        return 0.0
    j = np.arange(1, n + 1, dtype=float)
    m = (j ** (0.5 * target))[:, None] * e * (j ** (-0.5 * source))[None, :]
    v = np.ones(n) + 0.001 * np.arange(n)
    v /= np.linalg.norm(v)
    prev = 0.0
    g = m.conj().T @ m
    for _ in range(max_iter):
        w = g @ v
        s = float(np.linalg.norm(w))
        if s == 0.0:
            return 0.0
        v = w / s
        if abs(s - prev) <= tol * max(s, 1e-300):
            return math.sqrt(s)
        prev = s
    raise IterationLimitError(
        "power iteration did not converge", max_iter=max_iter, last=math.sqrt(prev)
    )


@dataclass(frozen=True)
class TorusFunction:
    """Scalar Fourier polynomial on the n-torus, modes |l|_inf <= K_phi."""

    n_freq: int
    K_phi: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for l, c in self.coeffs.items():
            lt = _as_mode(l, self.n_freq)
            if lt and max(abs(v) for v in lt) > self.K_phi:
                raise ValidationError("mode beyond cutoff", l=lt, K_phi=self.K_phi)
            c = complex(c)
            if c != 0.0:
                clean[lt] = c
        object.__setattr__(self, "coeffs", clean)

    def coeff(self, l) -> complex:
        return self.coeffs.get(_as_mode(l, self.n_freq), 0.0 + 0.0j)

    @property
    def mean(self) -> complex:
        return self.coeffs.get((0,) * self.n_freq, 0.0 + 0.0j)

    def eval(self, phi) -> complex | np.ndarray:
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if not self.coeffs:
            out = np.zeros(phi.shape[0], dtype=complex)
        else:
            modes = np.array(list(self.coeffs.keys()), dtype=float)
            vals = np.array(list(self.coeffs.values()), dtype=complex)
            out = np.exp(1j * (phi @ modes.T)) @ vals
        return out if out.size > 1 else complex(out[0])

    def is_real_for_real_phi(self, tol: float = 1e-12) -> bool:
        return all(
            abs(c - np.conj(self.coeffs.get(_neg(l), 0.0))) <= tol
            for l, c in self.coeffs.items()
        )

    def without_mean(self) -> "TorusFunction":
        c = dict(self.coeffs)
        c.pop((0,) * self.n_freq, None)
        return TorusFunction(self.n_freq, self.K_phi, c)

    def majorant(self, s: float = 0.0) -> float:
        return float(
            sum(abs(c) * math.exp(_mode_abs(l) * s) for l, c in self.coeffs.items())
        )

    def __add__(self, other: "TorusFunction") -> "TorusFunction":
        c = dict(self.coeffs)
        for l, v in other.coeffs.items():
            c[l] = c.get(l, 0.0) + v
        return TorusFunction(self.n_freq, max(self.K_phi, other.K_phi), c)

    def __sub__(self, other: "TorusFunction") -> "TorusFunction":
        c = dict(self.coeffs)
        for l, v in other.coeffs.items():
            c[l] = c.get(l, 0.0) - v
        return TorusFunction(self.n_freq, max(self.K_phi, other.K_phi), c)

    def __mul__(self, scalar) -> "TorusFunction":
        return TorusFunction(
            self.n_freq, self.K_phi, {l: scalar * c for l, c in self.coeffs.items()}
        )

    __rmul__ = __mul__


@dataclass(frozen=True)
class QPMatrix:
    """Matrix-valued Fourier polynomial: coeffs maps mode l to an N x N block."""

    n_freq: int
    K_phi: int
    N: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for l, block in self.coeffs.items():
            lt = _as_mode(l, self.n_freq)
            if lt and max(abs(v) for v in lt) > self.K_phi:
                raise ValidationError("mode beyond cutoff", l=lt, K_phi=self.K_phi)
            b = np.asarray(block, dtype=complex)
            if b.shape != (self.N, self.N):
                raise ValidationError(
                    "block has wrong shape", l=lt, shape=b.shape, N=self.N
                )
            if np.any(b != 0.0):
                clean[lt] = b
        object.__setattr__(self, "coeffs", clean)

    def block(self, l) -> np.ndarray:
        lt = _as_mode(l, self.n_freq)
        b = self.coeffs.get(lt)
        return b.copy() if b is not None else np.zeros((self.N, self.N), complex)

    def eval(self, phi) -> np.ndarray:
        """Sum the Fourier series at one real angle vector phi."""
        phi = np.asarray(phi, dtype=float).reshape(self.n_freq)
        out = np.zeros((self.N, self.N), dtype=complex)
        for l, b in self.coeffs.items():
            out += b * np.exp(1j * float(np.dot(l, phi)))
        return out

    def dagger(self) -> "QPMatrix":
        """Pointwise adjoint for real phi: block(l) -> block(-l)^H."""
        return QPMatrix(
            self.n_freq,
            self.K_phi,
            self.N,
            {_neg(l): b.conj().T for l, b in self.coeffs.items()},
        )

    def hermitian_defect(self) -> float:
        """Max-entry deviation from the Hermitian-for-real-phi convention."""
        d = 0.0
        seen = set()
        for l, b in self.coeffs.items():
            if l in seen:
                continue
            seen.add(l)
            seen.add(_neg(l))
            other = self.coeffs.get(_neg(l))
            oh = other.conj().T if other is not None else np.zeros_like(b)
            d = max(d, float(np.max(np.abs(b - oh))))
        return d

    def antihermitian_defect(self) -> float:
        d = 0.0
        seen = set()
        for l, b in self.coeffs.items():
            if l in seen:
                continue
            seen.add(l)
            seen.add(_neg(l))
            other = self.coeffs.get(_neg(l))
            oh = other.conj().T if other is not None else np.zeros_like(b)
            d = max(d, float(np.max(np.abs(b + oh))))
        return d

    def diag_part(self) -> "QPMatrix":
        return QPMatrix(
            self.n_freq,
            self.K_phi,
            self.N,
            {l: np.diag(np.diag(b)) for l, b in self.coeffs.items()},
        )

    def truncated(self, K_phi: int) -> "QPMatrix":
        """Drop every mode with |l|_inf beyond the given cutoff."""
        kept = {
            l: b.copy()
            for l, b in self.coeffs.items()
            if max(abs(v) for v in l) <= K_phi
        }
        return QPMatrix(self.n_freq, K_phi, self.N, kept)

    def phi_derivative(self, omega) -> "QPMatrix":
        """d/dt along phi = omega t: mode l multiplied by i <l, omega>."""
        om = np.asarray(omega, dtype=float).reshape(self.n_freq)
        return QPMatrix(
            self.n_freq,
            self.K_phi,
            self.N,
            {l: 1j * float(np.dot(l, om)) * b for l, b in self.coeffs.items()},
        )

    def __add__(self, other: "QPMatrix") -> "QPMatrix":
        _check_compat(self, other)
        c = {l: b.copy() for l, b in self.coeffs.items()}
        for l, b in other.coeffs.items():
            c[l] = c.get(l, 0.0) + b
        return QPMatrix(self.n_freq, max(self.K_phi, other.K_phi), self.N, c)

    def __sub__(self, other: "QPMatrix") -> "QPMatrix":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "QPMatrix":
        return QPMatrix(
            self.n_freq,
            self.K_phi,
            self.N,
            {l: scalar * b for l, b in self.coeffs.items()},
        )

    __rmul__ = __mul__


def _check_compat(a: QPMatrix, b: QPMatrix):
    if a.n_freq != b.n_freq or a.N != b.N:
        raise ValidationError(
            "incompatible operands",
            n_freq=(a.n_freq, b.n_freq),
            N=(a.N, b.N),
        )


def qp_identity(n_freq: int, K_phi: int, N: int) -> QPMatrix:
    return QPMatrix(n_freq, K_phi, N, {(0,) * n_freq: np.eye(N, dtype=complex)})


def qp_zero(n_freq: int, K_phi: int, N: int) -> QPMatrix:
    return QPMatrix(n_freq, K_phi, N, {})


def qp_product(
    a: QPMatrix, b: QPMatrix, K_out: int | None = None, return_dropped: bool = False
):
    """Convolution product truncated to |l|_inf <= K_out.

    ``K_out`` defaults to the larger operand cutoff; modes produced beyond
    it are dropped, and their total block mass (sum of max-entry moduli)
    is returned alongside when ``return_dropped`` is set.
    """
    _check_compat(a, b)
    if K_out is None:
        K_out = max(a.K_phi, b.K_phi)
    acc: dict[Mode, np.ndarray] = {}
    dropped = 0.0
    for la, ba in a.coeffs.items():
        for lb, bb in b.coeffs.items():
            l = tuple(x + y for x, y in zip(la, lb))
            block = ba @ bb
            if max(abs(v) for v in l) > K_out:
                dropped += float(np.max(np.abs(block)))
                continue
            if l in acc:
                acc[l] = acc[l] + block
            else:
                acc[l] = block
    out = QPMatrix(a.n_freq, K_out, a.N, acc)
    return (out, dropped) if return_dropped else out


def strip_norm(
    q: QPMatrix, beta: float, s: float, plus: bool = False, iota: float = 4.0 / 3.0
) -> float:
    """Weighted-l1 Fourier majorant sum_l e^(|l| s) |block(l)|.

    Upper-bounds the sup of the blockwise norm over the complex strip
    |Im phi| < s; the block norm is |.|_beta or |.|_beta^+ per ``plus``.
    """
    if s < 0:
        raise ValidationError("strip width must be nonnegative", s=s)
    total = 0.0
    for l, b in q.coeffs.items():
        nb = norm_beta_plus(b, beta, iota) if plus else norm_beta(b, beta)
        total += math.exp(_mode_abs(l) * s) * nb
    return total


def _alg_norm(q: QPMatrix) -> float:
    """Submultiplicative control norm: sum over modes of spectral norms."""
    return float(
        sum(np.linalg.norm(b, ord=2) for b in q.coeffs.values())
    )


def qp_exp(b: QPMatrix, tol: float = 1e-16) -> QPMatrix:
    """exp(B) in the truncated convolution algebra, scaling and squaring.

    The Taylor series of exp(B / 2^m) is summed until the next term falls
    below ``tol`` relative to the accumulated norm, then squared m times.
    Every product is truncated to B's own cutoff, so for anti-Hermitian B
    the result is unitary at real phi up to the dropped-tail mass.
    """
    nrm = _alg_norm(b)
    ident = qp_identity(b.n_freq, b.K_phi, b.N)
    if nrm == 0.0:
        return ident
    m = max(0, math.ceil(math.log2(nrm / 0.5))) if nrm > 0.5 else 0
    scaled = (0.5**m) * b
    term = ident
    acc = ident
    for k in range(1, 64):
        term = qp_product(term, scaled, K_out=b.K_phi) * (1.0 / k)
        acc = acc + term
        if _alg_norm(term) <= tol * max(_alg_norm(acc), 1.0):
            break
    for _ in range(m):
        acc = qp_product(acc, acc, K_out=b.K_phi)
    return acc


def qp_exp_dev(b: QPMatrix, tol: float = 1e-16) -> QPMatrix:
    """exp(B) - I without ever forming the identity subtraction.

    Summing the series from the linear term and doubling via
    S_2 = 2S + S*S keeps the deviation accurate at its own scale, which
    matters when exp(B) conjugates entries many orders larger than B:
    subtracting I from qp_exp would lose the deviation in rounding.
    """
    nrm = _alg_norm(b)
    if nrm == 0.0:
        return QPMatrix(b.n_freq, b.K_phi, b.N, {})
    m = max(0, math.ceil(math.log2(nrm / 0.5))) if nrm > 0.5 else 0
    scaled = (0.5**m) * b
    term = scaled
    acc = scaled
    for k in range(2, 64):
        term = qp_product(term, scaled, K_out=b.K_phi) * (1.0 / k)
        acc = acc + term
        if _alg_norm(term) <= tol * max(_alg_norm(acc), 1e-300):
            break
    for _ in range(m):
        acc = acc * 2.0 + qp_product(acc, acc, K_out=b.K_phi)
    return acc


def index_gap_inequality(iota: float, k_max: int = 200) -> dict:
    """Exhaustive check of |k^iota - j^iota| >= |k-j|(k^(iota-1)+j^(iota-1))/2.

    Returns the worst margin over 1 <= k, j <= k_max (nonnegative means the
    inequality holds everywhere).
    """
    idx = np.arange(1, k_max + 1, dtype=float)
    lhs = np.abs(idx[:, None] ** iota - idx[None, :] ** iota)
    rhs = (
        0.5
        * np.abs(idx[:, None] - idx[None, :])
        * (idx[:, None] ** (iota - 1.0) + idx[None, :] ** (iota - 1.0))
    )
    margin = lhs - rhs
    i, j = np.unravel_index(np.argmin(margin), margin.shape)
    return {
        "iota": iota,
        "k_max": k_max,
        "worst_margin": float(margin[i, j]),
        "worst_pair": (int(i + 1), int(j + 1)),
        "holds": bool(np.min(margin) >= -1e-12),
    }


def verify_algebra(
    trials: int, N: int, beta: float, iota: float, seed: int = 0
) -> dict:
    """Random-matrix certification of the product norm inequalities.

    Over ``trials`` pairs of complex Gaussian N x N matrices, fits the
    smallest constants C with |AB|_beta <= C |A|_beta |B|_beta^+ and
    |AB|_beta^+ <= C |A|_beta^+ |B|_beta^+, and runs the exhaustive
    index-gap inequality check.
    """
    if not (0.0 <= 2.0 * beta < iota - 1.0):
        raise ValidationError(
            "need 0 <= 2 beta < iota - 1", beta=beta, iota=iota
        )
    rng = np.random.default_rng(seed)
    c_mixed = 0.0
    c_plus = 0.0
    for _ in range(trials):
        a = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        b = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        ab = a @ b
        na, nb = norm_beta(a, beta), norm_beta(b, beta)
        nap = norm_beta_plus(a, beta, iota)
        nbp = norm_beta_plus(b, beta, iota)
        c_mixed = max(c_mixed, norm_beta(ab, beta) / (na * nbp))
        c_plus = max(c_plus, norm_beta_plus(ab, beta, iota) / (nap * nbp))
    gap = index_gap_inequality(iota)
    return {
        "trials": trials,
        "N": N,
        "beta": beta,
        "iota": iota,
        "C_mixed": c_mixed,
        "C_plus": c_plus,
        "index_gap": gap,
    }
