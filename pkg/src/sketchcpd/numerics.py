"""Scalar special functions, quadrature, SPD factorization and seeded randomness.

Everything downstream (ARL constants, whitening, Monte Carlo) is built on the
handful of primitives here, so they are kept small and pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot is not strictly positive.

    Attributes:
        pivot: zero-based index of the failing pivot.
    """

    def __init__(self, pivot: int, message: str | None = None) -> None:
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot} <= 0)")


# ---------------------------------------------------------------------------
# randomness


@dataclass
class RngStream:
    """A reproducible random stream identified by ``(root_seed, stream_id)``.

    The generator seed is ``SeedSequence(root_seed, spawn_key=(stream_id, *key))``,
    i.e. numpy's SeedSequence hash mixes the root seed with the spawn key. The
    underlying bit generator is PCG64. Distinct stream ids (and distinct keys
    below one stream id) give independent streams; identical ids give
    bit-identical draws.

    A stream is single-owner mutable state: hand each concurrent task its own.
    """

    root_seed: int
    stream_id: int = 0
    key: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.stream_id < 0:
            raise ValueError(f"stream_id must be non-negative, got {self.stream_id}")
        self.root_seed = int(self.root_seed) & 0xFFFFFFFFFFFFFFFF

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(self.root_seed, spawn_key=(self.stream_id, *self.key))
            self._gen = np.random.Generator(np.random.PCG64(seq))
        return self._gen

    def child(self, index: int) -> RngStream:
        """Independent sub-stream; does not consume draws from ``self``."""
        return RngStream(self.root_seed, self.stream_id, (*self.key, int(index)))

    # thin conveniences so callers rarely touch the generator directly
    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)


# ---------------------------------------------------------------------------
# normal distribution and the boundary-crossing special function


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function.

    ``erfc`` keeps full relative accuracy in the lower tail, so
    ``Phi(-x)`` for large ``x`` does not suffer the cancellation of ``1 - Phi(x)``.
    """
    return 0.5 * math.erfc(-x / _SQRT2)


def std_normal_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def nu_approx(u: float) -> float:
    """Rational approximation to the overshoot correction function nu(u).

    ``nu(u) ~ (2/u)(Phi(u/2) - 1/2) / ((u/2) Phi(u/2) + phi(u/2))``; tends to 1
    as ``u -> 0`` and decays like ``2/u^2`` for large ``u``.
    """
    if not u > 0.0:
        raise ValueError(f"nu_approx requires u > 0, got {u}")
    h = 0.5 * u
    cdf = std_normal_cdf(h)
    # Phi(h) - 1/2 = erf(h/sqrt2)/2 avoids cancellation for tiny u
    centred = 0.5 * math.erf(h / _SQRT2)
    return (2.0 / u) * centred / (h * cdf + std_normal_pdf(h))


def _u_nu2(u: float) -> float:
    v = nu_approx(u)
    return u * v * v


def adaptive_simpson(f, lo: float, hi: float, tol: float = 1e-9, max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature with Richardson correction.

    Uses an explicit stack instead of recursion. The tolerance is split in half
    at each bisection so the accepted panels sum to an absolute error of about
    ``tol``.
    """
    if hi == lo:
        return 0.0
    a, b = lo, hi
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * eps, depth + 1))
            stack.append((m, b, fm, frm, fb, right, 0.5 * eps, depth + 1))
    return total


def integrate_u_nu2(lo: float, hi: float, tol: float = 1e-9) -> float:
    """Integral of ``u * nu(u)**2`` over ``[lo, hi]`` (``0 < lo <= hi``)."""
    if not lo > 0.0:
        raise ValueError(f"lower limit must be positive, got {lo}")
    if hi < lo:
        raise ValueError(f"upper limit {hi} is below lower limit {lo}")
    return max(adaptive_simpson(_u_nu2, lo, hi, tol=tol), 0.0)


# ---------------------------------------------------------------------------
# SPD factorization


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == S``."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def cholesky_spd(S: np.ndarray, sym_tol: float = 1e-10) -> SpdFactor:
    """Cholesky factorization that names the failing pivot.

    Raises:
        ValueError: if ``S`` is not square or not symmetric within ``sym_tol``
            (relative to its largest entry).
        NotPositiveDefiniteError: on a non-positive pivot; ``.pivot`` is the
            zero-based index.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    scale = float(np.max(np.abs(S))) if S.size else 0.0
    if scale == 0.0:
        raise NotPositiveDefiniteError(0)
    if np.max(np.abs(S - S.T)) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    L, info = lapack.dpotrf(S, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf argument error {info}")
    return SpdFactor(np.ascontiguousarray(L))


def solve_lower(factor: SpdFactor, v: np.ndarray) -> np.ndarray:
    """Forward substitution ``L x = v``. ``v`` may be a vector or an (dim, k) block."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != factor.dim:
        raise ValueError(f"length {v.shape[0]} does not match factor dimension {factor.dim}")
    return solve_triangular(factor.lower, v, lower=True, check_finite=False)
