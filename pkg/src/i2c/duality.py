"""Numerical comparison between i2c beliefs and Riccati quantities on LQ problems.

The smoothed precision of each joint splits into the forward (prior) part and
the backward message. The backward precisions are compared with ``alpha Q_t``
and ``alpha V_t``, the posterior gains with the LQR gains, and the Schur
complement identities are checked directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import (linear_dynamics_list, lqr_backward, quadratic_cost_from_features,
                        risk_sensitive_backward)
from .costs import QuadraticFeatureCost
from .gaussian import Gaussian, inv_psd
from .inference import Linearize
from .solver import I2cConfig, e_step, extract_policy
from .systems import SystemModel


@dataclass
class DualityReport:
    """Maximum over ``t`` of each relative residual.

    ``q_update``: backward joint precision vs ``alpha Q_t``.
    ``gain``: posterior gain vs the LQR gain.
    ``v_update``: backward state precision vs ``alpha V_t``.
    ``risk_gap``: backward joint precision vs ``alpha Q_t`` of the risk-sensitive
    recursion with ``sigma = alpha``, with the input prior counted as input
    cost. This one is exact for any noise level.
    ``gain_identity``: ``-inv(L_uu) L_ux`` vs ``S_ux inv(S_x)`` of the posterior.
    ``schur_identity``: marginal state precision vs the Schur complement of the
    joint precision.
    """

    q_update: float
    gain: float
    v_update: float
    risk_gap: float
    gain_identity: float
    schur_identity: float
    per_t: dict


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def duality_report(sys: SystemModel, cost: QuadraticFeatureCost, x0_mean, horizon,
                   prior_scale=1e6, noise_scale=1e-9, alpha=1.0) -> DualityReport:
    """Run one exact E-step under a broad prior and compare with Riccati.

    The process noise is replaced by ``noise_scale * I``; the initial state
    and input priors have covariance ``prior_scale * I``.
    """
    dx, du = sys.dim_x, sys.dim_u
    sys = sys.with_process_noise(noise_scale * np.eye(dx))
    config = I2cConfig(horizon=horizon, iterations=1, propagator=Linearize(),
                       input_cov=prior_scale * np.eye(du), alpha0=alpha, update_alpha=False)
    x0 = Gaussian(np.asarray(x0_mean, dtype=float), prior_scale * np.eye(dx))
    prior = config.prior_policy(dx, du)
    belief = e_step(config, sys, cost, prior, alpha, x0)
    policy = extract_policy(belief)

    dyn = linear_dynamics_list(sys, horizon)
    quad = quadratic_cost_from_features(cost, horizon, dx, du)
    K, _, val = lqr_backward(dyn, quad)
    # the input prior acts as an extra input cost inv(P) / alpha
    prior_u = np.eye(du) / prior_scale
    C_aug = quad.C.copy()
    C_aug[:, dx:, dx:] += prior_u / alpha
    quad_aug = type(quad)(C_aug, quad.c, quad.C_T, quad.c_T, quad.c0, quad.c0_T)
    _, _, val_rs = risk_sensitive_backward(dyn, quad_aug, alpha)
    prior_block = np.zeros((dx + du, dx + du))
    prior_block[dx:, dx:] = prior_u

    names = ("q_update", "gain", "v_update", "risk_gap", "gain_identity", "schur_identity")
    per_t = {n: np.empty(horizon) for n in names}
    for t in range(horizon):
        L_post = inv_psd(belief.post_cov[t])
        L_prior = inv_psd(belief.pi_cov[t])
        back_tau = L_post - L_prior
        back_x = inv_psd(belief.xs_cov[t]) - inv_psd(belief.xf_cov[t])
        per_t["q_update"][t] = _rel(back_tau, alpha * val.Q[t])
        per_t["risk_gap"][t] = _rel(back_tau + prior_block, alpha * val_rs.Q[t])
        per_t["v_update"][t] = _rel(back_x, alpha * val.V[t])
        per_t["gain"][t] = _rel(policy.K[t], K[t])
        Luu, Lux, Lxx = L_post[dx:, dx:], L_post[dx:, :dx], L_post[:dx, :dx]
        S = belief.post_cov[t]
        gain_prec = -np.linalg.solve(Luu, Lux)
        gain_cov = np.linalg.solve(S[:dx, :dx], S[:dx, dx:]).T
        per_t["gain_identity"][t] = _rel(gain_prec, gain_cov)
        schur = Lxx - Lux.T @ np.linalg.solve(Luu, Lux)
        per_t["schur_identity"][t] = _rel(schur, inv_psd(S[:dx, :dx]))
    return DualityReport(*(float(per_t[n].max()) for n in names), per_t=per_t)
