"""Approximate Gaussian moment propagation through nonlinear maps.

Given ``x ~ N(mu, Sigma)`` and ``y = f(x) + noise``, each propagator returns a
Gaussian approximation of the joint over ``(x, y)``. Sigma-point methods
evaluate ``f`` once on a stacked point set, so ``f`` must broadcast over a
leading batch axis. Linearization calls ``f`` on single points only.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite_e

from .errors import NonFinitePropagation, UnsupportedDegree
from .gaussian import Gaussian, JointGaussian, cholesky, symmetrize
from .systems import numerical_jacobian

MAX_POINTS = 1_000_000


def gh_nodes(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite rule for ``N(0, 1)`` with weights summing to one."""
    if not isinstance(p, (int, np.integer)) or not 2 <= p <= 10:
        raise UnsupportedDegree(f"degree must be an integer in [2, 10], got {p!r}")
    nodes, weights = hermite_e.hermegauss(int(p))
    return nodes, weights / weights.sum()


class MomentPropagator:
    """Base class. Subclasses implement :meth:`moments`."""

    name = "base"

    def moments(self, f, mean, cov, jacobian=None):
        """Return ``(y_mean, y_cov, xy_cov)`` without additive noise."""
        raise NotImplementedError

    def propagate_arrays(self, f, mean, cov, noise=None, jacobian=None):
        y_mean, y_cov, xy_cov = self.moments(f, mean, cov, jacobian)
        if noise is not None:
            y_cov = y_cov + noise
        return y_mean, symmetrize(y_cov), xy_cov

    def __repr__(self):
        return f"{type(self).__name__}()"


class Linearize(MomentPropagator):
    """First-order Taylor expansion about the input mean."""

    name = "linearize"

    def moments(self, f, mean, cov, jacobian=None):
        if jacobian is not None:
            y0 = np.asarray(f(mean), dtype=float)
            J = np.asarray(jacobian(mean), dtype=float)
        else:
            y0, J = numerical_jacobian(f, mean)
        if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(J))):
            raise NonFinitePropagation("non-finite value or Jacobian at the mean")
        xy = cov @ J.T
        return y0, J @ xy, xy


class _PointRule(MomentPropagator):
    """Shared weighted-sum moment computation for fixed point sets."""

    def unit_points(self, n):
        raise NotImplementedError

    def moments(self, f, mean, cov, jacobian=None):
        Z, w = self.unit_points(mean.size)
        L = cholesky(cov)
        X = mean + Z @ L.T
        Y = np.asarray(f(X), dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if not np.all(np.isfinite(Y)):
            raise NonFinitePropagation(f"{self.name}: non-finite output at a sigma point")
        y_mean = w @ Y
        dY = Y - y_mean
        dX = X - mean
        wdY = dY * w[:, None]
        return y_mean, dY.T @ wdY, dX.T @ wdY


@lru_cache(maxsize=None)
def _cubature_points(n):
    Z = np.sqrt(n) * np.vstack([np.eye(n), -np.eye(n)])
    w = np.full(2 * n, 1.0 / (2 * n))
    Z.flags.writeable = False
    w.flags.writeable = False
    return Z, w


class Cubature(_PointRule):
    """Third-degree spherical-radial rule: ``2n`` points at ``+-sqrt(n)`` along each axis."""

    name = "cubature"

    def unit_points(self, n):
        return _cubature_points(n)


@lru_cache(maxsize=None)
def _gh_points(p, n):
    nodes, weights = gh_nodes(p)
    Z = np.array(list(itertools.product(nodes, repeat=n)))
    w = np.prod(np.array(list(itertools.product(weights, repeat=n))), axis=1)
    Z.flags.writeable = False
    w.flags.writeable = False
    return Z, w


class GaussHermite(_PointRule):
    """Tensor-product Gauss-Hermite rule with ``degree ** n`` points."""

    name = "gauss_hermite"

    def __init__(self, degree: int):
        gh_nodes(degree)
        self.degree = int(degree)

    def unit_points(self, n):
        if self.degree ** n > MAX_POINTS:
            raise UnsupportedDegree(
                f"{self.degree}^{n} points exceeds the budget of {MAX_POINTS}"
            )
        return _gh_points(self.degree, n)

    def __repr__(self):
        return f"GaussHermite({self.degree})"


class MonteCarlo(_PointRule):
    """Sample moments from ``n`` standard-normal draws fixed by ``seed``.

    Draws for each input dimension are generated once from ``(seed, dim)`` and
    reused, so results do not depend on call order.
    """

    name = "monte_carlo"

    def __init__(self, n: int, seed: int = 0):
        if n < 2:
            raise ValueError("Monte Carlo needs at least two samples")
        self.n = int(n)
        self.seed = int(seed)
        self._cache = {}

    def unit_points(self, n):
        if n not in self._cache:
            rng = np.random.default_rng([self.seed, n])
            Z = rng.standard_normal((self.n, n))
            w = np.full(self.n, 1.0 / self.n)
            self._cache[n] = (Z, w)
        return self._cache[n]

    def moments(self, f, mean, cov, jacobian=None):
        y_mean, y_cov, xy = super().moments(f, mean, cov, jacobian)
        # unbiased sample covariance
        k = self.n / (self.n - 1.0)
        return y_mean, k * y_cov, k * xy

    def __repr__(self):
        return f"MonteCarlo({self.n}, seed={self.seed})"


def propagate(prop: MomentPropagator, f, g: Gaussian, noise=None, jacobian=None) -> JointGaussian:
    """Joint Gaussian over ``(x, f(x) + noise)`` for ``x ~ g``."""
    y_mean, y_cov, xy = prop.propagate_arrays(f, g.mean, g.cov, noise, jacobian)
    return JointGaussian(g.mean, y_mean, g.cov, y_cov, xy)


def make_propagator(spec: str, seed: int = 0) -> MomentPropagator:
    """Parse ``linearize``, ``cubature``, ``gh:<p>`` or ``mc:<n>``."""
    spec = spec.strip().lower()
    if spec == "linearize":
        return Linearize()
    if spec == "cubature":
        return Cubature()
    kind, _, arg = spec.partition(":")
    try:
        value = int(arg)
    except ValueError:
        raise ValueError(f"unknown inference backend {spec!r}") from None
    if kind == "gh":
        return GaussHermite(value)
    if kind == "mc":
        return MonteCarlo(value, seed)
    raise ValueError(f"unknown inference backend {spec!r}")
