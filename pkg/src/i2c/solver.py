"""Input inference for control: Gaussian message passing over state-action trajectories.

One E-step is a forward filter and a backward smoother over the joint
``tau_t = (x_t, u_t)``:

* control step: combine the predicted state belief with the current policy prior;
* cost innovation: condition on the pseudo-observation ``z*_t`` of the features;
* dynamics prediction: push the innovated joint through the dynamics;
* backward smoothing: Rauch-Tung-Striebel recursion over the joints.

The M-step re-estimates the inverse temperature ``alpha`` and replaces the
policy prior with the posterior policy, so repeated E/M steps perform
posterior policy iteration.

Time indexing is zero-based: ``H`` inputs ``u_0..u_{H-1}``, ``H + 1`` states.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time
from typing import Optional

import numpy as np
from scipy import linalg

from .costs import QuadraticFeatureCost, expected_cost as _expected_cost
from .errors import DegenerateCost, I2cError, SingularCovariance
from .gaussian import Gaussian, JointGaussian, cholesky, kl_divergence, symmetrize
from .inference import Cubature, MomentPropagator
from .systems import SystemModel

logger = logging.getLogger(__name__)

MODES = ("ff", "fb", "expert")


def _solve(S, B):
    """``inv(S) @ B`` for SPD ``S`` via Cholesky."""
    L = cholesky(S)
    return linalg.cho_solve((L, True), B, check_finite=False)


# policies ----------------------------------------------------------------------


@dataclass
class LinearGaussianPolicy:
    """Time-varying stochastic linear controller ``u ~ N(K_t x + k_t, cov_t)``.

    ``state_mean``/``state_cov`` hold the planned state marginals the policy was
    extracted from. They define the feedforward law (the input marginal) and the
    distance used by the expert blend.
    """

    K: np.ndarray
    k: np.ndarray
    cov: np.ndarray
    state_mean: Optional[np.ndarray] = None
    state_cov: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.k.shape[0]

    @property
    def dim_u(self) -> int:
        return self.k.shape[1]

    @classmethod
    def open_loop(cls, mean, cov, dim_x) -> "LinearGaussianPolicy":
        """Feedforward prior with no state dependence."""
        mean = np.atleast_2d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        H, du = mean.shape
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (H, du, du)).copy()
        return cls(np.zeros((H, du, dim_x)), mean.copy(), cov)

    def has_plan(self) -> bool:
        return self.state_mean is not None

    def input_mean(self, t) -> np.ndarray:
        if self.state_mean is None:
            return self.k[t]
        return self.K[t] @ self.state_mean[t] + self.k[t]

    def input_cov(self, t) -> np.ndarray:
        if self.state_cov is None:
            return self.cov[t]
        K = self.K[t]
        return self.cov[t] + K @ self.state_cov[t] @ K.T

    def closed_loop_probability(self, t, x) -> np.ndarray:
        """Expert weight ``exp(-d/2)`` with ``d`` the squared Mahalanobis distance."""
        if self.state_mean is None:
            return np.ones(np.shape(x)[:-1])
        r = np.asarray(x, dtype=float) - self.state_mean[t]
        L = cholesky(self.state_cov[t])
        w = linalg.solve_triangular(L, r.T, lower=True, check_finite=False)
        d = np.sum(w * w, axis=0)
        return np.exp(-0.5 * d)

    def act(self, t, x, mode="fb"):
        """Mean control for state ``x`` (batched over leading axes)."""
        x = np.asarray(x, dtype=float)
        fb = x @ self.K[t].T + self.k[t]
        if mode == "fb":
            return fb
        ff = np.broadcast_to(self.input_mean(t), fb.shape)
        if mode == "ff":
            return ff.copy()
        if mode == "expert":
            p = self.closed_loop_probability(t, x)[..., None]
            return p * fb + (1.0 - p) * ff
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")

    def controller(self, mode="fb", stochastic=False):
        """Callable ``(t, x, rng) -> u`` for :func:`i2c.systems.rollout`.

        With ``stochastic`` the FB/FF components are sampled from their
        Gaussians and the expert picks one of them with probability ``p_CL``.
        """
        if not stochastic:
            return lambda t, x, rng=None: self.act(t, x, mode)

        def sample(t, x, rng):
            x = np.asarray(x, dtype=float)
            fb = x @ self.K[t].T + self.k[t]
            fb = fb + _sample_noise(rng, self.cov[t], fb.shape)
            ff = self.input_mean(t) + _sample_noise(rng, self.input_cov(t), fb.shape)
            if mode == "fb":
                return fb
            if mode == "ff":
                return ff
            p = self.closed_loop_probability(t, x)
            pick = rng.uniform(size=np.shape(p)) < p
            return np.where(np.asarray(pick)[..., None], fb, ff)

        return sample

    def law(self, t, mode, x_mean=None, x_cov=None):
        """Linear-Gaussian law ``(K, k, cov)`` used by the control step.

        For the expert, the feedback gain is scaled by the expectation of
        ``p_CL`` under the predicted state belief ``N(x_mean, x_cov)``.
        """
        if mode == "fb" or not self.has_plan():
            return self.K[t], self.k[t], self.cov[t]
        mu_u = self.input_mean(t)
        if mode == "ff":
            return np.zeros_like(self.K[t]), mu_u, self.input_cov(t)
        if mode != "expert":
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        p = expected_closed_loop_probability(self.state_mean[t], self.state_cov[t], x_mean, x_cov)
        K = p * self.K[t]
        KSK = self.K[t] @ self.state_cov[t] @ self.K[t].T
        return K, mu_u - K @ self.state_mean[t], self.cov[t] + (1.0 - p) * KSK

    def shifted(self) -> "LinearGaussianPolicy":
        """Drop the first step and duplicate the last one (receding horizon)."""

        def shift(a):
            return None if a is None else np.concatenate([a[1:], a[-1:]], axis=0)

        sm = self.state_mean
        if sm is not None and sm.shape[0] > self.horizon:
            sm = np.concatenate([sm[1:], sm[-1:]], axis=0)
        else:
            sm = shift(sm)
        sc = self.state_cov
        if sc is not None and sc.shape[0] > self.horizon:
            sc = np.concatenate([sc[1:], sc[-1:]], axis=0)
        else:
            sc = shift(sc)
        return LinearGaussianPolicy(shift(self.K), shift(self.k), shift(self.cov), sm, sc)


def expected_closed_loop_probability(plan_mean, plan_cov, x_mean, x_cov) -> float:
    """``E[exp(-d(x)/2)]`` for ``x ~ N(x_mean, x_cov)``, ``d`` measured against the plan.

    Equals ``sqrt(det P / det(P + S)) exp(-r^T (P + S)^-1 r / 2)``.
    """
    r = x_mean - plan_mean
    S = plan_cov + x_cov
    L = cholesky(S)
    w = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(cholesky(plan_cov)))) - np.sum(np.log(np.diag(L))))
    return float(np.exp(0.5 * logdet_ratio - 0.5 * w @ w))


def _sample_noise(rng, cov, shape):
    if not np.any(cov):
        return np.zeros(shape)
    return rng.standard_normal(shape) @ cholesky(cov).T


# belief ------------------------------------------------------------------------


@dataclass
class BeliefTrajectory:
    """Per-step Gaussians for each message-passing stage.

    ``pi_*``: joint after the control step; ``c_*``: after the cost innovation;
    ``xf_*``: predicted state (index 0 is the initial prior); ``cross``:
    covariance between the innovated joint and the next predicted state;
    ``post_*``: smoothed joints; ``xs_*``: smoothed state marginals.
    """

    dim_x: int
    dim_u: int
    pi_mean: np.ndarray
    pi_cov: np.ndarray
    c_mean: np.ndarray
    c_cov: np.ndarray
    xf_mean: np.ndarray
    xf_cov: np.ndarray
    cross: np.ndarray
    xc_mean: np.ndarray
    xc_cov: np.ndarray
    post_mean: Optional[np.ndarray] = None
    post_cov: Optional[np.ndarray] = None
    xs_mean: Optional[np.ndarray] = None
    xs_cov: Optional[np.ndarray] = None
    dz_mean: Optional[np.ndarray] = None
    dz_cov: Optional[np.ndarray] = None
    dz_terminal_mean: Optional[np.ndarray] = None
    dz_terminal_cov: Optional[np.ndarray] = None
    expected_cost: float = float("nan")
    expected_cost_per_step: Optional[np.ndarray] = None
    jitter_fallbacks: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.pi_mean.shape[0]

    def posterior(self, t) -> JointGaussian:
        """Smoothed joint over ``(x_t, u_t)``."""
        dx = self.dim_x
        m, S = self.post_mean[t], self.post_cov[t]
        return JointGaussian(m[:dx], m[dx:], S[:dx, :dx], S[dx:, dx:], S[:dx, dx:])

    def state_posterior(self, t) -> Gaussian:
        return Gaussian(self.xs_mean[t], self.xs_cov[t])


@dataclass
class I2cConfig:
    """Solver settings.

    :param input_mean: prior input mean, shape ``(d_u,)`` or ``(H, d_u)``.
    :param input_cov: prior input covariance, ``(d_u, d_u)`` or ``(H, d_u, d_u)``.
    :param alpha0: initial inverse temperature; ``None`` calibrates it from a
        prior-only forward pass.
    :param gamma: ratio bound of the temperature update.
    :param update_alpha: disable to keep ``alpha`` fixed.
    :param smoothed_moments: use smoothed (default) or filtered joints for the
        temperature update.
    """

    horizon: int
    iterations: int = 100
    propagator: MomentPropagator = field(default_factory=Cubature)
    input_mean: np.ndarray = None
    input_cov: np.ndarray = None
    alpha0: Optional[float] = None
    gamma: float = 2.0
    update_alpha: bool = True
    mode: str = "fb"
    tol: float = 1e-6
    patience: int = 5
    smoothed_moments: bool = True
    terminal_target: Optional[Gaussian] = None
    anneal_fraction: float = 0.8

    def __post_init__(self):
        if self.iterations < 0 or self.horizon < 1:
            raise ValueError("horizon must be >= 1 and iterations >= 0")
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def prior_policy(self, dim_x, dim_u) -> LinearGaussianPolicy:
        H = self.horizon
        mean = np.zeros(dim_u) if self.input_mean is None else np.asarray(self.input_mean, float)
        cov = np.eye(dim_u) if self.input_cov is None else np.asarray(self.input_cov, float)
        mean = np.broadcast_to(mean, (H, dim_u)).copy()
        cov = np.broadcast_to(cov, (H, dim_u, dim_u)).copy()
        for S in cov:
            cholesky(S)
        return LinearGaussianPolicy.open_loop(mean, cov, dim_x)


@dataclass
class Diagnostics:
    expected_cost: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    clamp_active: list = field(default_factory=list)
    iteration_seconds: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    converged: bool = False
    error: Optional[str] = None

    @property
    def iterations(self) -> int:
        return len(self.expected_cost)


# message passing steps ---------------------------------------------------------


def _control_step(K, k, S_pi, mx, Sx):
    mu = K @ mx + k
    Sxu = Sx @ K.T
    Su = S_pi + K @ Sxu
    mean = np.concatenate([mx, mu])
    cov = np.block([[Sx, Sxu], [Sxu.T, Su]])
    return mean, symmetrize(cov)


def control_step(policy_t, x_pred: Gaussian) -> JointGaussian:
    """Joint of ``(x_t, u_t)`` under the law ``policy_t = (K, k, cov)``."""
    K, k, S_pi = (np.asarray(a, dtype=float) for a in policy_t)
    cholesky(S_pi + 1e-12 * np.trace(S_pi) * np.eye(S_pi.shape[0])) if np.any(S_pi) else None
    mean, cov = _control_step(K, k, S_pi, x_pred.mean, x_pred.cov)
    return JointGaussian.from_full(mean, cov, x_pred.dim)


def _innovate(prop, h, target, noise, mean, cov):
    """Kalman update of ``N(mean, cov)`` on the pseudo-observation ``target``."""
    mz, Sz, Stz = prop.propagate_arrays(h, mean, cov, noise)
    G = _solve(Sz, Stz.T).T
    mean = mean + G @ (target - mz)
    cov = symmetrize(cov - G @ Stz.T)
    return mean, cov


def _tau_features(cost, t, dx):
    f = cost.features
    return lambda tau: f(t, tau[..., :dx], tau[..., dx:])


def cost_innovation(propagator, cost: QuadraticFeatureCost, t, alpha, joint: JointGaussian):
    """Condition the joint ``(x_t, u_t)`` on ``z*_t``.

    Returns the updated joint and the residual moments ``(E[dz], Cov[z])`` of
    the prior joint (before the update, without observation noise).
    """
    dx = joint.dims[0]
    h = _tau_features(cost, t, dx)
    W = cost.running_weight(t)
    noise = _solve(alpha * W, np.eye(W.shape[0]))
    mean, cov = _innovate(propagator, h, cost.running_target(t), noise, joint.mean, joint.cov)
    mz, Sz, _ = propagator.propagate_arrays(h, joint.mean, joint.cov)
    return JointGaussian.from_full(mean, cov, dx), (cost.running_target(t) - mz, Sz)


def _predict(prop, sys, t, mean, cov):
    f = lambda tau: sys.f_tau(t, tau)
    jac = None
    if sys.jacobian is not None:
        dx = sys.dim_x
        jac = lambda tau: sys.jacobian(t, tau[:dx], tau[dx:])
    return prop.propagate_arrays(f, mean, cov, sys.noise_cov(t), jac)


def dynamics_prediction(propagator, sys: SystemModel, t, joint: JointGaussian) -> JointGaussian:
    """Joint over ``(tau_t, x_{t+1})`` with the process noise added to ``x_{t+1}``."""
    mx, Sx, Stx = _predict(propagator, sys, t, joint.mean, joint.cov)
    return JointGaussian(joint.mean, mx, joint.cov, Sx, Stx)


def _rts(c_mean, c_cov, cross, xf_mean, xf_cov, xs_mean, xs_cov):
    G = _solve(xf_cov, cross.T).T
    mean = c_mean + G @ (xs_mean - xf_mean)
    cov = symmetrize(c_cov + G @ (xs_cov - xf_cov) @ G.T)
    return mean, cov


def backward_smooth(belief: BeliefTrajectory, seed: Optional[Gaussian] = None) -> BeliefTrajectory:
    """Fill in the smoothed joints, seeded at the terminal filtered state.

    ``seed`` replaces the terminal state belief (covariance control).
    """
    H, dx = belief.horizon, belief.dim_x
    dt = dx + belief.dim_u
    post_mean = np.empty((H, dt))
    post_cov = np.empty((H, dt, dt))
    xs_mean = np.empty((H + 1, dx))
    xs_cov = np.empty((H + 1, dx, dx))
    if seed is None:
        xs_mean[H], xs_cov[H] = belief.xc_mean, belief.xc_cov
    else:
        xs_mean[H], xs_cov[H] = seed.mean, seed.cov
    for t in range(H - 1, -1, -1):
        try:
            m, S = _rts(belief.c_mean[t], belief.c_cov[t], belief.cross[t],
                        belief.xf_mean[t + 1], belief.xf_cov[t + 1], xs_mean[t + 1], xs_cov[t + 1])
        except I2cError as exc:
            exc.t = t
            raise
        post_mean[t], post_cov[t] = m, S
        xs_mean[t], xs_cov[t] = m[:dx], S[:dx, :dx]
    belief.post_mean, belief.post_cov = post_mean, post_cov
    belief.xs_mean, belief.xs_cov = xs_mean, xs_cov
    return belief


def extract_policy(belief: BeliefTrajectory) -> LinearGaussianPolicy:
    """Conditional ``p(u_t | x_t)`` of every smoothed joint."""
    H, dx, du = belief.horizon, belief.dim_x, belief.dim_u
    K = np.empty((H, du, dx))
    k = np.empty((H, du))
    cov = np.empty((H, du, du))
    belief.jitter_fallbacks = []
    for t in range(H):
        m, S = belief.post_mean[t], belief.post_cov[t]
        Sx, Sux, Su = S[:dx, :dx], S[dx:, :dx], S[dx:, dx:]
        try:
            Kt = _solve(Sx, Sux.T).T
        except SingularCovariance:
            logger.warning("singular state posterior at t=%d, using feedforward", t)
            belief.jitter_fallbacks.append(t)
            Kt = np.zeros((du, dx))
        K[t] = Kt
        k[t] = m[dx:] - Kt @ m[:dx]
        cov[t] = symmetrize(Su - Kt @ Sux.T)
    return LinearGaussianPolicy(K, k, cov, belief.xs_mean[:H].copy(), belief.xs_cov[:H].copy())


# E-step ------------------------------------------------------------------------


def _forward(config, sys, cost, policy, alpha, x0: Gaussian, innovate=True, terminal=True):
    H, dx, du = config.horizon, sys.dim_x, sys.dim_u
    dt = dx + du
    prop = config.propagator
    pi_mean = np.empty((H, dt))
    pi_cov = np.empty((H, dt, dt))
    c_mean = np.empty((H, dt))
    c_cov = np.empty((H, dt, dt))
    xf_mean = np.empty((H + 1, dx))
    xf_cov = np.empty((H + 1, dx, dx))
    cross = np.empty((H, dt, dx))
    xf_mean[0], xf_cov[0] = x0.mean, x0.cov
    for t in range(H):
        try:
            K, k, S_pi = policy.law(t, config.mode, xf_mean[t], xf_cov[t])
            m, S = _control_step(K, k, S_pi, xf_mean[t], xf_cov[t])
            pi_mean[t], pi_cov[t] = m, S
            if innovate:
                W = cost.running_weight(t)
                noise = _solve(alpha * W, np.eye(W.shape[0]))
                m, S = _innovate(prop, _tau_features(cost, t, dx), cost.running_target(t),
                                 noise, m, S)
            c_mean[t], c_cov[t] = m, S
            xf_mean[t + 1], xf_cov[t + 1], cross[t] = _predict(prop, sys, t, m, S)
        except I2cError as exc:
            exc.t = t
            raise
    mT, ST = xf_mean[H], xf_cov[H]
    if innovate and terminal:
        noise = _solve(alpha * cost.terminal_weight, np.eye(cost.dim_z_terminal))
        mT, ST = _innovate(prop, cost.terminal_features, cost.terminal_target, noise, mT, ST)
    return BeliefTrajectory(dx, du, pi_mean, pi_cov, c_mean, c_cov, xf_mean, xf_cov, cross, mT, ST)


def _residual_moments(config, cost, belief, source, terminal=True):
    """Residual moments of the features under the chosen joints."""
    prop, dx = config.propagator, belief.dim_x
    H = belief.horizon
    means, covs, xT = source
    dz_mean = np.empty((H, cost.dim_z))
    dz_cov = np.empty((H, cost.dim_z, cost.dim_z))
    for t in range(H):
        mz, Sz, _ = prop.propagate_arrays(_tau_features(cost, t, dx), means[t], covs[t])
        dz_mean[t] = cost.running_target(t) - mz
        dz_cov[t] = Sz
    belief.dz_mean, belief.dz_cov = dz_mean, dz_cov
    if terminal:
        mz, Sz, _ = prop.propagate_arrays(cost.terminal_features, *xT)
        belief.dz_terminal_mean = cost.terminal_target - mz
        belief.dz_terminal_cov = Sz
    else:
        belief.dz_terminal_mean = np.zeros(cost.dim_z_terminal)
        belief.dz_terminal_cov = np.zeros((cost.dim_z_terminal,) * 2)
    total, per = _expected_cost(cost, belief)
    belief.expected_cost, belief.expected_cost_per_step = total, per
    return belief


def e_step(config: I2cConfig, sys: SystemModel, cost: QuadraticFeatureCost,
           policy_prior: LinearGaussianPolicy, alpha: float, x0: Gaussian,
           terminal_seed: Optional[Gaussian] = None) -> BeliefTrajectory:
    """Forward filter, backward smoother and posterior residual moments.

    With ``terminal_seed`` the terminal cost is not used and the smoother is
    seeded from the given state belief instead.
    """
    terminal = terminal_seed is None
    belief = _forward(config, sys, cost, policy_prior, alpha, x0, terminal=terminal)
    backward_smooth(belief, terminal_seed)
    if config.smoothed_moments:
        source = (belief.post_mean, belief.post_cov, (belief.xs_mean[-1], belief.xs_cov[-1]))
    else:
        source = (belief.c_mean, belief.c_cov, (belief.xc_mean, belief.xc_cov))
    return _residual_moments(config, cost, belief, source, terminal)


def temperature_update(cost: QuadraticFeatureCost, belief: BeliefTrajectory, terminal=True):
    """Unclamped maximum-likelihood inverse temperature for a belief."""
    H = belief.horizon
    denom = 0.0
    for t in range(H):
        M = belief.dz_cov[t] + np.outer(belief.dz_mean[t], belief.dz_mean[t])
        denom += np.sum(cost.running_weight(t) * M)
    count = H * cost.dim_z
    if terminal:
        M = belief.dz_terminal_cov + np.outer(belief.dz_terminal_mean, belief.dz_terminal_mean)
        denom += np.sum(cost.terminal_weight * M)
        count += cost.dim_z_terminal
    if not np.isfinite(denom) or denom <= np.finfo(float).tiny * count:
        raise DegenerateCost("expected residual vanished; the cost is already attained")
    return count / denom


def clamp_alpha(raw, alpha_prev, gamma):
    lo, hi = alpha_prev / gamma, alpha_prev * gamma
    clamped = min(max(raw, lo), hi)
    return clamped, clamped != raw


def m_step(cost: QuadraticFeatureCost, belief: BeliefTrajectory, alpha_prev: float,
           gamma: float, terminal=True):
    """New ``alpha`` (ratio-clamped), clamp flag and the posterior policy."""
    raw = temperature_update(cost, belief, terminal)
    alpha, clamped = clamp_alpha(raw, alpha_prev, gamma)
    return alpha, clamped, extract_policy(belief)


def calibrate_alpha(config, sys, cost, policy, x0, terminal=True) -> float:
    """Temperature update applied to the prior-only forward belief."""
    belief = _forward(config, sys, cost, policy, 1.0, x0, innovate=False)
    source = (belief.pi_mean, belief.pi_cov, (belief.xf_mean[-1], belief.xf_cov[-1]))
    _residual_moments(config, cost, belief, source, terminal)
    return temperature_update(cost, belief, terminal)


def _stalled(trace, tol, patience):
    if len(trace) <= patience:
        return False
    recent = trace[-(patience + 1):]
    for a, b in zip(recent[:-1], recent[1:]):
        if (a - b) > tol * max(abs(a), 1e-300):
            return False
    return True


def solve(config: I2cConfig, sys: SystemModel, cost: QuadraticFeatureCost, x0: Gaussian,
          policy: Optional[LinearGaussianPolicy] = None, alpha: Optional[float] = None,
          callback=None):
    """Alternate E- and M-steps.

    Returns ``(policy, belief, diagnostics)``. Stops after ``config.iterations``
    or when the relative improvement of the expected cost stays below
    ``config.tol`` for ``config.patience`` consecutive iterations. On a solver
    error the last good iterate is returned with ``diagnostics.error`` set when
    at least one iteration succeeded; otherwise the error propagates.
    """
    if policy is None:
        policy = config.prior_policy(sys.dim_x, sys.dim_u)
    if alpha is None:
        alpha = config.alpha0
    if alpha is None:
        alpha = calibrate_alpha(config, sys, cost, policy, x0)
    diag = Diagnostics()
    belief = None
    for it in range(config.iterations):
        start = time.perf_counter()
        try:
            new_belief = e_step(config, sys, cost, policy, alpha, x0)
            clamped = False
            new_alpha = alpha
            if config.update_alpha:
                try:
                    new_alpha, clamped, new_policy = m_step(cost, new_belief, alpha, config.gamma)
                except DegenerateCost:
                    new_policy = extract_policy(new_belief)
                    diag.converged = True
            else:
                new_policy = extract_policy(new_belief)
        except I2cError as exc:
            if belief is None:
                raise
            diag.error = f"{type(exc).__name__} at t={getattr(exc, 't', None)}: {exc}"
            logger.warning("iteration %d failed: %s", it, diag.error)
            break
        belief, policy = new_belief, new_policy
        diag.iteration_seconds.append(time.perf_counter() - start)
        diag.expected_cost.append(belief.expected_cost)
        diag.alpha.append(alpha)
        diag.clamp_active.append(bool(clamped))
        alpha = new_alpha
        if callback is not None:
            callback(it, policy, belief, alpha)
        if diag.converged or _stalled(diag.expected_cost, config.tol, config.patience):
            diag.converged = True
            break
    diag.final_alpha = alpha
    return policy, belief, diag


# expert controller -------------------------------------------------------------


def expert_policy(policy: LinearGaussianPolicy, belief: Optional[BeliefTrajectory] = None):
    """Mean-mode expert controller ``(t, x, rng) -> u``.

    The planned state marginals come from ``belief`` when given, otherwise
    from the ones stored on ``policy``.
    """
    if belief is not None:
        H = policy.horizon
        policy = LinearGaussianPolicy(policy.K, policy.k, policy.cov,
                                      belief.xs_mean[:H], belief.xs_cov[:H])
    if not policy.has_plan():
        raise ValueError("expert controller needs planned state marginals")
    return policy.controller("expert")


# covariance control ------------------------------------------------------------


def annealing_weight(iteration, iterations, fraction=0.8):
    """Weight of the forward terminal belief: linear from 1 to 0, then 0."""
    span = max(1, int(round(fraction * iterations)))
    return max(0.0, 1.0 - iteration / span)


def pinned_terminal(target: Gaussian, forward_mean, forward_cov, beta) -> Gaussian:
    """``p(x*)^(1 - beta) * p_forward(x)^beta``, normalized.

    When the forward belief already equals the target the result is the
    target for every ``beta``, so a target-matching policy stays fixed.
    """
    Lt = _solve(target.cov, np.eye(target.dim))
    nu = (1.0 - beta) * Lt @ target.mean
    Lam = (1.0 - beta) * Lt
    if beta > 0:
        Lf = _solve(forward_cov, np.eye(target.dim))
        nu = nu + beta * Lf @ forward_mean
        Lam = Lam + beta * Lf
    S = _solve(symmetrize(Lam), np.eye(target.dim))
    return Gaussian(S @ nu, S)


def closed_loop_terminal(sys, policy: LinearGaussianPolicy, x0: Gaussian, propagator=None,
                         mode="fb") -> Gaussian:
    """Terminal state belief from propagating the stochastic policy forward."""
    prop = propagator or Cubature()
    m, S = x0.mean.copy(), x0.cov.copy()
    for t in range(policy.horizon):
        K, k, S_pi = policy.law(t, mode, m, S)
        tm, tS = _control_step(K, k, S_pi, m, S)
        m, S, _ = _predict(prop, sys, t, tm, tS)
    return Gaussian(m, S)


def covariance_control_solve(config: I2cConfig, sys: SystemModel, cost: QuadraticFeatureCost,
                             x0: Gaussian, target: Gaussian, alpha: float,
                             policy: Optional[LinearGaussianPolicy] = None):
    """Steer the terminal state distribution to ``target``.

    ``cost`` supplies the running (input) cost only; its terminal part is
    ignored. ``alpha`` stays fixed. The running-cost likelihood enters the
    first forward pass only; later passes propagate the current policy, so
    the iteration alternates between the two boundary conditions and has the
    target-matching policy as its fixed point. The smoother is seeded with a
    geometric blend of the forward terminal belief (weight ``beta``) and the
    target (weight ``1 - beta``), with ``beta`` annealed linearly to zero.
    ``diagnostics.kl`` records ``KL(target || closed-loop terminal)`` per
    iteration.
    """
    if policy is None:
        policy = config.prior_policy(sys.dim_x, sys.dim_u)
    diag = Diagnostics()
    belief = None
    N = config.iterations
    for it in range(N):
        start = time.perf_counter()
        beta = annealing_weight(it, N, config.anneal_fraction)
        fwd = _forward(config, sys, cost, policy, alpha, x0, innovate=(it == 0), terminal=False)
        seed = pinned_terminal(target, fwd.xc_mean, fwd.xc_cov, beta)
        backward_smooth(fwd, seed)
        source = (fwd.post_mean, fwd.post_cov, (fwd.xs_mean[-1], fwd.xs_cov[-1]))
        belief = _residual_moments(config, cost, fwd, source, terminal=False)
        policy = extract_policy(belief)
        terminal = closed_loop_terminal(sys, policy, x0, config.propagator)
        try:
            kl = kl_divergence(target, terminal)
        except SingularCovariance:
            kl = float("inf")
        diag.kl.append(kl)
        diag.expected_cost.append(belief.expected_cost)
        diag.alpha.append(alpha)
        diag.clamp_active.append(False)
        diag.iteration_seconds.append(time.perf_counter() - start)
    diag.final_alpha = alpha
    return policy, belief, diag
