"""Quadratic feature-space costs and their reading as Gaussian likelihoods.

A running cost is ``C_t(x, u) = 1/2 (z*_t - h_t(x, u))^T Theta_t (z*_t - h_t(x, u))``
and the terminal cost has the same form over ``x`` alone. Exponentiating
``-alpha * C_t`` gives a Gaussian pseudo-observation ``z*_t`` of ``h_t`` with
noise precision ``alpha * Theta_t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gaussian import cholesky, inv_psd

Features = Callable[[int, np.ndarray, np.ndarray], np.ndarray]
TerminalFeatures = Callable[[np.ndarray], np.ndarray]


def _per_step(values, ndim_single):
    values = np.asarray(values, dtype=float)
    if values.ndim == ndim_single:
        return lambda t: values
    return lambda t: values[min(t, values.shape[0] - 1)]


@dataclass(frozen=True)
class QuadraticFeatureCost:
    """Running and terminal quadratic costs in feature space.

    Targets and weights may be given once or with a leading time axis. Feature
    maps must broadcast over leading batch axes.
    """

    features: Features
    target: np.ndarray
    weight: np.ndarray
    terminal_features: TerminalFeatures
    terminal_target: np.ndarray
    terminal_weight: np.ndarray

    def __post_init__(self):
        for name, nd in (("target", 1), ("weight", 2), ("terminal_target", 1), ("terminal_weight", 2)):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        W = self.weight.reshape((-1,) + self.weight.shape[-2:])
        for Wt in W:
            if not np.allclose(Wt, Wt.T, atol=1e-12):
                raise ValueError("running weight must be symmetric")
            cholesky(Wt)
        if not np.allclose(self.terminal_weight, self.terminal_weight.T, atol=1e-12):
            raise ValueError("terminal weight must be symmetric")
        cholesky(self.terminal_weight)
        object.__setattr__(self, "_target_t", _per_step(self.target, 1))
        object.__setattr__(self, "_weight_t", _per_step(self.weight, 2))

    @property
    def dim_z(self) -> int:
        return self.target.shape[-1]

    @property
    def dim_z_terminal(self) -> int:
        return self.terminal_target.shape[-1]

    def running_target(self, t) -> np.ndarray:
        return self._target_t(t)

    def running_weight(self, t) -> np.ndarray:
        return self._weight_t(t)

    def cost(self, t, x, u):
        """Running cost at step ``t``; broadcasts over batches of ``(x, u)``."""
        r = self.running_target(t) - self.features(t, x, u)
        return 0.5 * np.einsum("...i,ij,...j->...", r, self.running_weight(t), r)

    def terminal_cost(self, x):
        r = self.terminal_target - self.terminal_features(x)
        return 0.5 * np.einsum("...i,ij,...j->...", r, self.terminal_weight, r)

    def total_cost(self, X, U) -> float:
        H = U.shape[0]
        return float(sum(self.cost(t, X[t], U[t]) for t in range(H)) + self.terminal_cost(X[H]))

    def with_targets(self, target=None, terminal_target=None) -> "QuadraticFeatureCost":
        return QuadraticFeatureCost(
            self.features,
            self.target if target is None else target,
            self.weight,
            self.terminal_features,
            self.terminal_target if terminal_target is None else terminal_target,
            self.terminal_weight,
        )


def observation_model(c: QuadraticFeatureCost, t, alpha: float, horizon: int | None = None):
    """Pseudo-observation ``(h, z*, Sigma_xi)`` for step ``t``.

    ``h`` takes a stacked state-action (or, at ``t == horizon``, a state) and
    ``Sigma_xi = inv(alpha * Theta_t)``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if horizon is not None and t == horizon:
        return c.terminal_features, c.terminal_target, inv_psd(alpha * c.terminal_weight)
    W = c.running_weight(t)
    return c.features, c.running_target(t), inv_psd(alpha * W)


def residual_second_moment(target, z_mean, z_cov):
    """``E[dz dz^T]`` for ``dz = z* - z`` with ``z ~ N(z_mean, z_cov)``."""
    r = target - z_mean
    return z_cov + np.einsum("...i,...j->...ij", r, r)


def expected_cost(c: QuadraticFeatureCost, belief):
    """Expected cost of a belief carrying residual moments.

    ``belief`` must expose ``dz_mean``/``dz_cov`` (one row per input step) and
    ``dz_terminal_mean``/``dz_terminal_cov``. Returns ``(total, per_step)``;
    the last entry of ``per_step`` is the terminal cost.
    """
    H = belief.dz_mean.shape[0]
    per = np.empty(H + 1)
    for t in range(H):
        M = belief.dz_cov[t] + np.outer(belief.dz_mean[t], belief.dz_mean[t])
        per[t] = 0.5 * np.sum(c.running_weight(t) * M)
    M = belief.dz_terminal_cov + np.outer(belief.dz_terminal_mean, belief.dz_terminal_mean)
    per[H] = 0.5 * np.sum(c.terminal_weight * M)
    return float(per.sum()), per


# reference feature maps ---------------------------------------------------------


def angle_embedding(x, angle_index):
    """Replace the listed angle coordinates by ``(sin, cos)`` pairs, in order."""
    x = np.asarray(x, dtype=float)
    parts = []
    for i in range(x.shape[-1]):
        if i in angle_index:
            parts.append(np.sin(x[..., i:i + 1]))
            parts.append(np.cos(x[..., i:i + 1]))
        else:
            parts.append(x[..., i:i + 1])
    return np.concatenate(parts, axis=-1)


def embedded_state_features(angle_index, with_input=True):
    """Features ``(embedded x, u)`` (running) or embedded ``x`` (terminal)."""
    angle_index = tuple(angle_index)
    if with_input:
        return lambda t, x, u: np.concatenate([angle_embedding(x, angle_index), u], axis=-1)
    return lambda x: angle_embedding(x, angle_index)


def state_input_features():
    """Identity features on ``tau = (x, u)``; with identity targets this is LQR."""
    return lambda t, x, u: np.concatenate([x, u], axis=-1)


def input_features():
    """Input-only features, for minimum-energy running costs."""
    return lambda t, x, u: np.asarray(u, dtype=float)


def state_features():
    return lambda x: np.asarray(x, dtype=float)
