"""Multivariate Gaussian algebra in moment and canonical form.

Every inversion goes through a Cholesky factorization. A failed factorization
is retried once with a small trace-scaled diagonal load, then reported as
:class:`~i2c.errors.SingularCovariance`. The number of retries is counted so
callers can check that no regularization happened on well-posed problems.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg

from .errors import SingularCovariance

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-9

_jitter_events = 0


def jitter_count() -> int:
    """Number of jittered factorizations since the last reset."""
    return _jitter_events


def reset_jitter_count() -> None:
    global _jitter_events
    _jitter_events = 0


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``S`` with a single jittered retry."""
    global _jitter_events
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    d = S.shape[-1]
    load = JITTER_SCALE * np.trace(S) / d
    if not np.isfinite(load) or load <= 0.0:
        raise SingularCovariance("covariance is not positive definite")
    _jitter_events += 1
    logger.debug("cholesky retry with diagonal load %.3e", load)
    try:
        return np.linalg.cholesky(S + load * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc


def solve_psd(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``S X = B`` for symmetric positive definite ``S``."""
    L = cholesky(S)
    return linalg.cho_solve((L, True), B, check_finite=False)


def inv_psd(S: np.ndarray) -> np.ndarray:
    """Explicit inverse of an SPD matrix, for when the precision is the output."""
    d = S.shape[-1]
    return symmetrize(solve_psd(S, np.eye(d)))


def logdet_psd(S: np.ndarray) -> float:
    L = cholesky(S)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal ``N(mean, cov)``.

    The covariance is symmetrized on construction and both arrays are made
    read-only so instances can be shared freely.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float).reshape(mean.size, mean.size)
        cov = symmetrize(cov)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        L = cholesky(self.cov)
        shape = (self.dim,) if n is None else (n, self.dim)
        eps = rng.standard_normal(shape)
        return self.mean + eps @ L.T

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        L = cholesky(self.cov)
        r = (x - self.mean).T
        w = linalg.solve_triangular(L, r, lower=True, check_finite=False)
        maha = np.sum(w * w, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * (maha + logdet + self.dim * np.log(2.0 * np.pi))


@dataclass(frozen=True)
class JointGaussian:
    """Gaussian over a stacked pair ``(a, b)`` kept in block form."""

    mean_a: np.ndarray
    mean_b: np.ndarray
    cov_a: np.ndarray
    cov_b: np.ndarray
    cov_ab: np.ndarray

    def __post_init__(self):
        ma = np.array(self.mean_a, dtype=float).reshape(-1)
        mb = np.array(self.mean_b, dtype=float).reshape(-1)
        da, db = ma.size, mb.size
        Sa = symmetrize(np.array(self.cov_a, dtype=float).reshape(da, da))
        Sb = symmetrize(np.array(self.cov_b, dtype=float).reshape(db, db))
        Sab = np.array(self.cov_ab, dtype=float).reshape(da, db)
        for arr in (ma, mb, Sa, Sb, Sab):
            arr.flags.writeable = False
        object.__setattr__(self, "mean_a", ma)
        object.__setattr__(self, "mean_b", mb)
        object.__setattr__(self, "cov_a", Sa)
        object.__setattr__(self, "cov_b", Sb)
        object.__setattr__(self, "cov_ab", Sab)

    @property
    def dims(self) -> tuple[int, int]:
        return self.mean_a.size, self.mean_b.size

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mean_a, self.mean_b])

    @property
    def cov(self) -> np.ndarray:
        return np.block([[self.cov_a, self.cov_ab], [self.cov_ab.T, self.cov_b]])

    def as_gaussian(self) -> Gaussian:
        return Gaussian(self.mean, self.cov)

    @classmethod
    def from_full(cls, mean, cov, dim_a: int) -> "JointGaussian":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        a, b = slice(0, dim_a), slice(dim_a, None)
        return cls(mean[a], mean[b], cov[a, a], cov[b, b], cov[a, b])


def canonical(g: Gaussian) -> tuple[np.ndarray, np.ndarray]:
    """Information form ``(nu, Lambda)`` with ``Lambda = inv(cov)``."""
    Lam = inv_psd(g.cov)
    return Lam @ g.mean, Lam


def from_canonical(nu, Lam) -> Gaussian:
    Lam = symmetrize(np.asarray(Lam, dtype=float))
    S = inv_psd(Lam)
    return Gaussian(S @ np.asarray(nu, dtype=float), S)


def marginal(j: JointGaussian, block: str) -> Gaussian:
    if block == "a":
        return Gaussian(j.mean_a, j.cov_a)
    if block == "b":
        return Gaussian(j.mean_b, j.cov_b)
    raise ValueError(f"block must be 'a' or 'b', got {block!r}")


def condition(j: JointGaussian, b_value) -> Gaussian:
    """Distribution of ``a`` given ``b = b_value``."""
    b_value = np.asarray(b_value, dtype=float).reshape(-1)
    G = solve_psd(j.cov_b, j.cov_ab.T).T
    mean = j.mean_a + G @ (b_value - j.mean_b)
    cov = j.cov_a - G @ j.cov_ab.T
    return Gaussian(mean, cov)


def fuse(forward: Gaussian, backward: Gaussian) -> Gaussian:
    """Normalized product of two Gaussian messages over the same variable."""
    nu_f, Lam_f = canonical(forward)
    nu_b, Lam_b = canonical(backward)
    return from_canonical(nu_f + nu_b, Lam_f + Lam_b)


def kl_divergence(p: Gaussian, q: Gaussian) -> float:
    """``KL(p || q)``; ``p`` must also be non-degenerate for a finite value."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    Lq = cholesky(q.cov)
    Lp = cholesky(p.cov)
    A = linalg.solve_triangular(Lq, Lp, lower=True, check_finite=False)
    r = linalg.solve_triangular(Lq, q.mean - p.mean, lower=True, check_finite=False)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    kl = 0.5 * (np.sum(A * A) + r @ r - p.dim + logdet_ratio)
    return max(float(kl), 0.0)


def mahalanobis(g: Gaussian, x) -> float:
    """Squared Mahalanobis distance of ``x`` from ``g``."""
    L = cholesky(g.cov)
    w = linalg.solve_triangular(
        L, np.asarray(x, dtype=float) - g.mean, lower=True, check_finite=False
    )
    return float(w @ w)
