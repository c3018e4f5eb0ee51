"""Shared numerical primitives.

SPD matrices held in Cholesky form, multivariate normal / Student-t log
densities, univariate normal and t cdf/quantile pairs, stable
log-sum-exp, bracketed root finding, golden-section maximization,
Gauss-Legendre quadrature helpers, and reproducible RNG streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import optimize, special

__all__ = [
    "SpdMatrix",
    "RngStream",
    "mvn_logpdf",
    "mvt_logpdf",
    "normal_cdf",
    "normal_quantile",
    "t_cdf",
    "t_quantile",
    "logsumexp",
    "find_root",
    "golden_max",
    "gauss_legendre",
]

LOG_2PI = math.log(2.0 * math.pi)

_U64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """One round of SplitMix64; used only to derive child stream ids."""
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (seed, stream id).

    Backed by the counter-based Philox generator, so identical
    (seed, stream) pairs yield identical draw sequences regardless of
    how many other streams exist or in which order they are consumed.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _U64)
        object.__setattr__(self, "stream", int(self.stream) & _U64)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """Derive an independent substream; deterministic in ``index``."""
        mixed = _splitmix64(self.stream ^ _splitmix64(int(index) & _U64))
        return RngStream(self.seed, mixed)


class SpdMatrix:
    """A symmetric positive-definite matrix stored via its lower Cholesky factor.

    Construction symmetrizes the input and, if the factorization fails,
    retries once after adding diagonal jitter of 1e-10 * trace / dim
    (SA iterates can graze the SPD boundary). A second failure raises.
    """

    __slots__ = ("dim", "chol")

    def __init__(self, matrix):
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix contains non-finite entries")
        a = 0.5 * (a + a.T)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * np.trace(a) / a.shape[0]
            if jitter <= 0:
                jitter = 1e-12
            try:
                chol = np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
            except np.linalg.LinAlgError as exc:
                raise ValueError("matrix is not positive definite") from exc
        self.dim = a.shape[0]
        self.chol = chol

    @classmethod
    def from_cholesky(cls, factor) -> "SpdMatrix":
        L = np.asarray(factor, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("Cholesky factor must be square")
        if np.any(np.diag(L) <= 0):
            raise ValueError("Cholesky factor must have positive diagonal")
        obj = cls.__new__(cls)
        obj.dim = L.shape[0]
        obj.chol = np.tril(L)
        return obj

    @property
    def matrix(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def solve(self, b) -> np.ndarray:
        """Solve V x = b."""
        y = np.linalg.solve(self.chol, b)
        return np.linalg.solve(self.chol.T, y)

    def maha(self, x) -> np.ndarray:
        """Quadratic forms x_i' V^-1 x_i for rows x_i of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = np.linalg.solve(self.chol, x.T)
        return np.einsum("ij,ij->j", w, w)

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim})"


def mvn_logpdf(x, mu, cov: SpdMatrix):
    """Log density of N(mu, cov) at rows of ``x``.

    ``x`` may be a single vector or an (n, p) array; returns a scalar or
    an (n,) array accordingly.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    if xx.shape[1] != cov.dim or mu.shape[-1] != cov.dim:
        raise ValueError(
            f"dimension mismatch: x has {xx.shape[1]}, mu has {mu.shape[-1]}, "
            f"cov has {cov.dim}"
        )
    q = cov.maha(xx - mu)
    out = -0.5 * (cov.dim * LOG_2PI + cov.logdet + q)
    return float(out[0]) if single else out


def mvt_logpdf(x, mu, scale: SpdMatrix, nu: float):
    """Log density of the multivariate t with ``nu`` dof, location ``mu``
    and scale matrix ``scale``.  Requires nu > 2 (dof below the variance
    truncation are rejected)."""
    if nu <= 2:
        raise ValueError(f"degrees of freedom must exceed 2, got {nu}")
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    single = x.ndim == 1
    xx = np.atleast_2d(x)
    p = scale.dim
    if xx.shape[1] != p or mu.shape[-1] != p:
        raise ValueError("dimension mismatch in mvt_logpdf")
    q = scale.maha(xx - mu)
    const = (
        special.gammaln(0.5 * (nu + p))
        - special.gammaln(0.5 * nu)
        - 0.5 * p * math.log(nu * math.pi)
        - 0.5 * scale.logdet
    )
    out = const - 0.5 * (nu + p) * np.log1p(q / nu)
    return float(out[0]) if single else out


def t_logpdf_1d(x, nu: float):
    """Univariate t_nu(0, 1) log density; vectorized."""
    x = np.asarray(x, dtype=float)
    const = (
        special.gammaln(0.5 * (nu + 1.0))
        - special.gammaln(0.5 * nu)
        - 0.5 * math.log(nu * math.pi)
    )
    return const - 0.5 * (nu + 1.0) * np.log1p(x * x / nu)


def normal_cdf(z):
    """Standard normal cdf."""
    return special.ndtr(z)


def normal_quantile(u):
    """Standard normal quantile; input must lie strictly inside (0, 1)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("quantile input must lie strictly inside (0, 1)")
    out = special.ndtri(u_arr)
    return float(out) if np.isscalar(u) or u_arr.ndim == 0 else out


def t_cdf(z, nu: float):
    """cdf of the t distribution with ``nu`` degrees of freedom."""
    return special.stdtr(nu, z)


def t_quantile(u, nu: float):
    """Quantile of the t distribution; input strictly inside (0, 1)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("quantile input must lie strictly inside (0, 1)")
    out = special.stdtrit(nu, u_arr)
    return float(out) if np.isscalar(u) or u_arr.ndim == 0 else out


def logsumexp(v, axis=None, b=None, return_sign=False):
    """log(sum(b * exp(v))); thin wrapper that rejects empty input."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    return special.logsumexp(v, axis=axis, b=b, return_sign=return_sign)


def find_root(f, target, bracket, xtol=1e-12, ftol=1e-10):
    """Solve f(x) = target for monotone increasing f on ``bracket``.

    The target must lie between f(lo) and f(hi); otherwise raises.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    flo, fhi = f(lo) - target, f(hi) - target
    if flo > 0.0:
        if flo <= ftol:
            return lo
        raise ValueError(f"target {target} lies below f({lo}) = {flo + target}")
    if fhi < 0.0:
        if -fhi <= ftol:
            return hi
        raise ValueError(f"target {target} lies above f({hi}) = {fhi + target}")
    return float(optimize.brentq(lambda x: f(x) - target, lo, hi, xtol=xtol))


def golden_max(fn, lo, hi, iters=30):
    """Golden-section maximization of ``fn`` on [lo, hi].

    Returns (argmax, max). Deterministic fixed-iteration refinement; the
    final interval shrinks by 0.618**iters.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    if fc >= fd:
        return c, fc
    return d, fd


def gauss_legendre(lo: float, hi: float, n: int):
    """Gauss-Legendre nodes and weights on [lo, hi]."""
    x, w = leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w
