"""Cubature Kalman filtering and the receding-horizon control loop.

The loop alternates filter update, replanning from the filtered belief,
execution of the first control and filter prediction. Planners keep their
previous solution and shift it one step to warm-start the next problem.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .baselines import cem_solve, ilqr_solve
from .costs import QuadraticFeatureCost
from .errors import I2cError, NonFiniteState
from .gaussian import Gaussian, cholesky, solve_psd, symmetrize
from .inference import Cubature, MomentPropagator
from .solver import MODES, I2cConfig, LinearGaussianPolicy, solve
from .systems import SystemModel, Trajectory, step

logger = logging.getLogger(__name__)

PLANNERS = ("i2c", "ilqr", "cem")


# filtering ---------------------------------------------------------------------


@dataclass(frozen=True)
class FilterState:
    """Belief ``p(x_t | y_0..y_t)`` with the last innovation for diagnostics."""

    belief: Gaussian
    t: int = 0
    innovation: Optional[np.ndarray] = None
    innovation_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        cholesky(self.belief.cov)


def ckf_predict(sys: SystemModel, filt: FilterState, u,
                propagator: Optional[MomentPropagator] = None) -> FilterState:
    """Propagate the belief through ``f_t(., u)`` and add the process noise."""
    prop = Cubature() if propagator is None else propagator
    t = filt.t
    u = np.asarray(u, dtype=float)
    f = lambda x: sys.f(t, x, np.broadcast_to(u, x.shape[:-1] + u.shape))
    jac = None
    if sys.jacobian is not None:
        jac = lambda x: sys.jacobian(t, x, u)[:, : sys.dim_x]
    mean, cov, _ = prop.propagate_arrays(f, filt.belief.mean, filt.belief.cov,
                                         sys.noise_cov(t), jac)
    return FilterState(Gaussian(mean, cov), t + 1)


def ckf_update(sys: SystemModel, filt: FilterState, y,
               propagator: Optional[MomentPropagator] = None) -> FilterState:
    """Condition the belief on the measurement ``y = g_t(x) + zeta``."""
    prop = Cubature() if propagator is None else propagator
    t = filt.t
    g = lambda x: sys.g(t, x)
    m, S = filt.belief.mean, filt.belief.cov
    my, Sy, Sxy = prop.propagate_arrays(g, m, S, sys.measurement_noise)
    G = solve_psd(Sy, Sxy.T).T
    r = np.asarray(y, dtype=float) - my
    belief = Gaussian(m + G @ r, symmetrize(S - G @ Sxy.T))
    return FilterState(belief, t, r, Sy)


# planners ----------------------------------------------------------------------


@dataclass
class MpcConfig:
    """Receding-horizon settings.

    ``step_iterations = 0`` only shifts the warm-started plan, which replays
    the one-shot solution.
    """

    horizon: int
    warm_start_iterations: int = 50
    step_iterations: int = 1
    planner: str = "i2c"
    mode: str = "fb"
    i2c: Optional[I2cConfig] = None
    ilqr_mu0: float = 1e-6
    particles: int = 50
    cem_iterations: int = 20
    cem_std: float = 1.0
    input_mean: Optional[np.ndarray] = None
    input_cov: Optional[np.ndarray] = None
    propagator: MomentPropagator = field(default_factory=Cubature)
    planning_noise_scale: float = 1.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.warm_start_iterations < 1 or self.step_iterations < 0:
            raise ValueError("warm_start_iterations must be >= 1 and step_iterations >= 0")
        if self.planner not in PLANNERS:
            raise ValueError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.planning_noise_scale <= 0:
            raise ValueError("planning_noise_scale must be positive")

    def i2c_config(self) -> I2cConfig:
        if self.i2c is not None:
            return replace(self.i2c, horizon=self.horizon)
        return I2cConfig(horizon=self.horizon, propagator=self.propagator,
                         input_mean=self.input_mean, input_cov=self.input_cov)


def _shift(a):
    return np.concatenate([a[1:], a[-1:]], axis=0)


class I2cPlanner:
    """Inference planner. The temperature is frozen after the warm start."""

    def __init__(self, sys: SystemModel, cfg: MpcConfig):
        self.sys = sys
        self.cfg = cfg
        self.config = cfg.i2c_config()
        self.policy: Optional[LinearGaussianPolicy] = None
        self.alpha: Optional[float] = None

    def warm_start(self, cost, belief: Gaussian):
        config = replace(self.config, iterations=self.cfg.warm_start_iterations)
        self.policy, _, diag = solve(config, self.sys, cost, belief)
        self.alpha = diag.final_alpha

    def replan(self, cost, belief: Gaussian, iterations):
        if iterations == 0:
            return
        config = replace(self.config, iterations=iterations, update_alpha=False,
                         alpha0=self.alpha)
        policy, _, diag = solve(config, self.sys, cost, belief, policy=self.policy,
                                alpha=self.alpha)
        if diag.error is not None:
            raise I2cError(diag.error)
        self.policy = policy

    def control(self, belief: Gaussian, mode):
        return self.policy.act(0, belief.mean, mode)

    def shift(self):
        self.policy = self.policy.shifted()


class IlqrPlanner:
    """Deterministic planner about its own nominal trajectory.

    The nominal is re-anchored at the predicted next state of the previous
    plan, so the feedforward input never depends on measurements; feedback
    mode closes the loop with ``u = u_bar + K (x_hat - x_bar)``.
    """

    def __init__(self, sys: SystemModel, cfg: MpcConfig):
        self.sys = sys
        self.cfg = cfg
        self.result = None
        mean = np.zeros(sys.dim_u) if cfg.input_mean is None else cfg.input_mean
        self.U = np.broadcast_to(mean, (cfg.horizon, sys.dim_u)).copy()

    def _solve(self, cost, x0, iterations):
        self.result = ilqr_solve(self.sys, cost, x0, self.cfg.horizon, max_iters=iterations,
                                 U_init=self.U, mu0=self.cfg.ilqr_mu0)
        self.U = self.result.inputs

    def warm_start(self, cost, belief: Gaussian):
        self._solve(cost, belief.mean, self.cfg.warm_start_iterations)

    def replan(self, cost, belief: Gaussian, iterations):
        if iterations > 0:
            self._solve(cost, self.result.states[0], iterations)

    def control(self, belief: Gaussian, mode):
        u_bar = self.result.inputs[0]
        if mode == "ff":
            return u_bar.copy()
        fb = u_bar + self.result.K[0] @ (belief.mean - self.result.states[0])
        if mode == "fb":
            return fb
        # deterministic plan: the expert blends against the nominal with unit covariance
        d = np.sum((belief.mean - self.result.states[0]) ** 2)
        p = np.exp(-0.5 * d)
        return p * fb + (1.0 - p) * u_bar

    def shift(self):
        r = self.result
        X = r.states
        r.states = np.concatenate([X[1:], X[-1:]], axis=0)
        r.inputs = _shift(r.inputs)
        r.K, r.k = _shift(r.K), _shift(r.k)
        self.U = r.inputs


class CemPlanner:
    """Sampling planner over open-loop input sequences.

    It has no feedback gains, so every execution mode applies the mean of the
    first input.
    """

    def __init__(self, sys: SystemModel, cfg: MpcConfig, seed=0):
        self.sys = sys
        self.cfg = cfg
        self.seed = seed
        self.calls = 0
        mean = np.zeros(sys.dim_u) if cfg.input_mean is None else cfg.input_mean
        self.mean = np.broadcast_to(mean, (cfg.horizon, sys.dim_u)).copy()

    def _solve(self, cost, x0, iterations):
        seed = int(np.random.SeedSequence([self.seed, self.calls]).generate_state(1)[0])
        self.calls += 1
        res = cem_solve(self.sys, cost, x0, self.cfg.horizon, n=self.cfg.particles,
                        iters=iterations, seed=seed, mean=self.mean, std=self.cfg.cem_std)
        self.mean = res.mean

    def warm_start(self, cost, belief: Gaussian):
        self._solve(cost, belief.mean, self.cfg.warm_start_iterations)

    def replan(self, cost, belief: Gaussian, iterations):
        if iterations > 0:
            self._solve(cost, belief.mean, iterations)

    def control(self, belief: Gaussian, mode):
        return self.mean[0].copy()

    def shift(self):
        self.mean = _shift(self.mean)


def make_planner(sys: SystemModel, cfg: MpcConfig, seed=0):
    """Planner for ``cfg.planner`` on ``sys`` with its process noise scaled for planning."""
    if cfg.planning_noise_scale != 1.0:
        scale = cfg.planning_noise_scale
        sys = sys.with_process_noise(lambda t, f=sys.noise_cov: scale * f(t))
    if cfg.planner == "i2c":
        return I2cPlanner(sys, cfg)
    if cfg.planner == "ilqr":
        return IlqrPlanner(sys, cfg)
    return CemPlanner(sys, cfg, seed)


def mpc_step(planner, belief: Gaussian, cost: QuadraticFeatureCost, mode: str,
             iterations: int):
    """Replan from ``belief``, pick the first control and shift the plan.

    If replanning fails the previous plan's next control is executed and the
    error message is returned alongside it.
    """
    error = None
    try:
        planner.replan(cost, belief, iterations)
    except (I2cError, np.linalg.LinAlgError, FloatingPointError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        logger.warning("replanning failed, executing previous plan: %s", error)
    u = np.asarray(planner.control(belief, mode), dtype=float)
    planner.shift()
    return u, planner, error


# closed loop -------------------------------------------------------------------


@dataclass
class MpcRun:
    """Closed-loop record. ``beliefs`` hold the filtered belief used at each step."""

    trajectory: Trajectory
    belief_mean: np.ndarray
    belief_cov: np.ndarray
    errors: list

    @property
    def total_cost(self) -> float:
        return self.trajectory.total_cost


def _closed_loop(sys, cost_window, cfg, T_total, seed, x0, planner, estimate):
    # separate streams so measurement draws never shift the process noise
    rng, rng_y = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    x = x0.sample(rng)
    if planner is None:
        planner = make_planner(sys, cfg, seed)
        planner.warm_start(cost_window(0), x0)
    else:
        planner = copy.deepcopy(planner)
    dx, du = sys.dim_x, sys.dim_u
    X = np.empty((T_total + 1, dx))
    U = np.empty((T_total, du))
    c = np.zeros(T_total + 1)
    M = np.empty((T_total + 1, dx))
    P = np.empty((T_total + 1, dx, dx))
    Y = []
    errors = []
    X[0] = x
    filt = FilterState(x0, 0)

    def partial(t):
        traj = Trajectory(X[: t + 1], U[:t], c[: t + 1], seed,
                          np.array(Y) if Y else None)
        return MpcRun(traj, M[:t], P[:t], errors)

    for t in range(T_total):
        filt, y = estimate(filt, X[t], rng_y)
        if y is not None:
            Y.append(y)
        M[t], P[t] = filt.belief.mean, filt.belief.cov
        cost = cost_window(t)
        u, planner, err = mpc_step(planner, filt.belief, cost, cfg.mode, cfg.step_iterations)
        if err is not None:
            errors.append((t, err))
        U[t] = u
        c[t] = cost.cost(0, X[t], u)
        try:
            X[t + 1] = step(sys, t, X[t], u, rng=rng)
        except NonFiniteState as exc:
            exc.partial = partial(t)
            raise
        filt = ckf_predict(sys, filt, u, cfg.propagator)
    c[T_total] = cost_window(T_total).terminal_cost(X[T_total])
    M[T_total], P[T_total] = filt.belief.mean, filt.belief.cov
    traj = Trajectory(X, U, c, seed, np.array(Y) if Y else None)
    return MpcRun(traj, M, P, errors)


def run_partially_observed(sys: SystemModel, cost_window: Callable[[int], QuadraticFeatureCost],
                           cfg: MpcConfig, T_total: int, seed: int, x0: Gaussian,
                           planner=None) -> MpcRun:
    """Filter, plan and act for ``T_total`` steps.

    ``cost_window(t)`` gives the planning cost whose step 0 is global step
    ``t``. ``planner`` may be an already warm-started planner, which is copied
    so it can be reused across seeds. The initial state is drawn from ``x0``
    and the first measurement is taken at ``t = 0``. Initial state and process
    noise share one stream and measurement noise uses another, both derived
    from ``seed``.
    """
    if sys.measurement is None:
        raise ValueError(f"system {sys.name!r} has no measurement model")

    def estimate(filt, x, rng):
        y = sys.g(filt.t, x) + cholesky(sys.measurement_noise) @ rng.standard_normal(sys.dim_y)
        return ckf_update(sys, filt, y, cfg.propagator), y

    return _closed_loop(sys, cost_window, cfg, T_total, seed, x0, planner, estimate)


def run_fully_observed(sys: SystemModel, cost_window, cfg: MpcConfig, T_total: int, seed: int,
                       x0: Gaussian, planner=None, state_cov=1e-12) -> MpcRun:
    """Same loop with the true state handed to the planner as ``N(x, state_cov I)``."""
    S = state_cov * np.eye(sys.dim_x)

    def estimate(filt, x, rng):
        return FilterState(Gaussian(x, S), filt.t), None

    return _closed_loop(sys, cost_window, cfg, T_total, seed, x0, planner, estimate)


def warm_planner(sys: SystemModel, cost_window, cfg: MpcConfig, x0: Gaussian, seed=0):
    """Planner warm-started on the initial belief, reusable across seeds."""
    planner = make_planner(sys, cfg, seed)
    planner.warm_start(cost_window(0), x0)
    return planner


def run_seeds(sys: SystemModel, cost_window, cfg: MpcConfig, T_total: int, seeds, x0: Gaussian):
    """One partially observed run per seed, sharing a single warm start.

    A run that leaves the finite state space is reported with an infinite
    total cost and its partial trace.
    """
    planner = warm_planner(sys, cost_window, cfg, x0)
    runs = []
    for seed in seeds:
        try:
            runs.append(run_partially_observed(sys, cost_window, cfg, T_total, seed, x0,
                                               planner=planner))
        except NonFiniteState as exc:
            run = exc.partial
            run.trajectory.step_costs = np.append(run.trajectory.step_costs, np.inf)
            runs.append(run)
    return runs
