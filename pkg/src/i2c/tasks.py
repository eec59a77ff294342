"""Benchmark problems: system, cost, initial belief, horizon and input prior."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Optional

import numpy as np

from . import systems
from .costs import (QuadraticFeatureCost, embedded_state_features, input_features,
                    state_features, state_input_features)
from .gaussian import Gaussian
from .systems import SystemModel


@dataclass
class Task:
    name: str
    system: SystemModel
    cost: QuadraticFeatureCost
    x0: Gaussian
    horizon: int
    input_mean: np.ndarray
    input_cov: np.ndarray
    goal_error: Callable[[np.ndarray], np.ndarray]
    extras: dict = field(default_factory=dict)

    def with_horizon(self, horizon: int) -> "Task":
        return replace(self, horizon=horizon)


# nonzero prior input mean that breaks the hanging-at-rest symmetry of the swing-ups
SWING_BIAS = 0.5


def _wrapped(angle):
    return np.abs(np.angle(np.exp(1j * (np.asarray(angle) - np.pi))))


def pendulum_swingup(horizon=120, **params) -> Task:
    """Swing the pendulum from hanging to upright."""
    sys = systems.pendulum(**params)
    feat = embedded_state_features((0,))
    term = embedded_state_features((0,), with_input=False)
    cost = QuadraticFeatureCost(
        feat, np.array([0.0, -1.0, 0.0, 0.0]), np.diag([1.0, 1.0, 0.1, 0.05]),
        term, np.array([0.0, -1.0, 0.0]), np.diag([100.0, 100.0, 10.0]))
    x0 = Gaussian(np.zeros(2), 1e-4 * np.eye(2))
    return Task("pendulum", sys, cost, x0, horizon, np.full(1, SWING_BIAS), np.eye(1) * 4.0,
                lambda X: _wrapped(X[..., 0]))


def cartpole_swingup(horizon=100, **params) -> Task:
    """Swing the pole up while returning the cart to the origin."""
    sys = systems.cartpole(**params)
    feat = embedded_state_features((1,))
    term = embedded_state_features((1,), with_input=False)
    cost = QuadraticFeatureCost(
        feat, np.array([0.0, 0.0, -1.0, 0.0, 0.0, 0.0]),
        np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.01]),
        term, np.array([0.0, 0.0, -1.0, 0.0, 0.0]), np.diag([100.0, 200.0, 200.0, 10.0, 10.0]))
    x0 = Gaussian(np.zeros(4), 1e-4 * np.eye(4))
    return Task("cartpole", sys, cost, x0, horizon, np.full(1, SWING_BIAS), np.eye(1) * 25.0,
                lambda X: _wrapped(X[..., 1]))


def double_cartpole_swingup(horizon=100, **params) -> Task:
    """Swing both poles up from hanging."""
    sys = systems.double_cartpole(**params)
    feat = embedded_state_features((1, 2))
    term = embedded_state_features((1, 2), with_input=False)
    running = np.diag([1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.01])
    cost = QuadraticFeatureCost(
        feat, np.array([0.0, 0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]), running,
        term, np.array([0.0, 0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0]),
        np.diag([100.0, 200.0, 200.0, 200.0, 200.0, 10.0, 10.0, 10.0]))
    x0 = Gaussian(np.zeros(6), 1e-4 * np.eye(6))
    return Task("double_cartpole", sys, cost, x0, horizon, np.full(1, SWING_BIAS),
                np.eye(1) * 100.0,
                lambda X: np.maximum(_wrapped(X[..., 1]), _wrapped(X[..., 2])))


def load_path(name="quadcopter_path.csv") -> np.ndarray:
    """Reference path rows ``(t, x, y, theta)`` from the packaged fixture."""
    with resources.files("i2c.data").joinpath(name).open() as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r and r[0] != "t"]
    return np.array(rows)


class TrackingCost:
    """Time-indexed quadratic tracking of a pose path, windowed for receding horizons.

    State targets are the path pose and its finite-difference velocity; the
    input target is the hover thrust.
    """

    def __init__(self, path, dt, weight, terminal_weight, u_ref):
        pose = path[:, 1:4]
        vel = np.gradient(pose, dt, axis=0)
        u = np.broadcast_to(u_ref, (pose.shape[0], len(u_ref)))
        self.state_targets = np.hstack([pose, vel])
        self.targets = np.hstack([self.state_targets, u])
        self.weight = np.asarray(weight, dtype=float)
        self.terminal_weight = np.asarray(terminal_weight, dtype=float)
        self.length = pose.shape[0]

    def window(self, start: int, horizon: int) -> QuadraticFeatureCost:
        """Cost for steps ``start .. start + horizon`` (terminal at the end)."""
        idx = np.minimum(np.arange(start, start + horizon), self.length - 1)
        end = min(start + horizon, self.length - 1)
        return QuadraticFeatureCost(state_input_features(), self.targets[idx], self.weight,
                                    state_features(), self.state_targets[end],
                                    self.terminal_weight)


def quadcopter_tracking(horizon=40, noise_level="low", steps=160, **params) -> Task:
    """Follow the packaged path, including a full flip, from noisy rotor measurements."""
    sys = systems.quadcopter(noise_level, **params)
    hover = systems.hover_thrust(sys.params)
    path = load_path()
    state_w = np.array([100.0, 100.0, 10.0, 1.0, 1.0, 0.1])
    weight = np.diag(np.r_[state_w, 0.01, 0.01])
    tracking = TrackingCost(path, sys.dt, weight, np.diag(state_w), np.full(2, hover))
    x0 = Gaussian(np.zeros(6), 1e-4 * np.eye(6))

    def pose_error(X):
        # distance to the path point reached at the end of the run
        return np.linalg.norm(np.asarray(X)[..., :2] - path[steps, 1:3], axis=-1)

    return Task("quadcopter", sys, tracking.window(0, horizon), x0, horizon,
                np.full(2, hover), np.eye(2) * 4.0, pose_error,
                extras={"tracking": tracking, "steps": steps, "path": path,
                        "planning_noise_scale": 1e-2})


@dataclass
class CovarianceControlProblem:
    """Terminal-distribution steering: input-only running cost and a Gaussian target."""

    name: str
    system: SystemModel
    cost: QuadraticFeatureCost
    x0: Gaussian
    target: Gaussian
    horizon: int
    iterations: int
    alpha: float
    input_mean: np.ndarray
    input_cov: np.ndarray
    exact: bool


def _input_cost(sys):
    du, dx = sys.dim_u, sys.dim_x
    return QuadraticFeatureCost(input_features(), np.zeros(du), np.eye(du),
                                state_features(), np.zeros(dx), np.eye(dx))


def linear_covariance_control() -> CovarianceControlProblem:
    """Open-loop unstable 2-d linear system steered to a correlated Gaussian."""
    sys = systems.linear_unstable()
    target = Gaussian(np.zeros(2), np.array([[0.3, 0.05], [0.05, 0.2]]))
    return CovarianceControlProblem("linear", sys, _input_cost(sys),
                                    Gaussian(np.array([1.0, -1.0]), 0.5 * np.eye(2)), target,
                                    20, 200, 1.0, np.zeros(2), np.eye(2), True)


def pendulum_covariance_control(x0_mean=(0.0, 0.0)) -> CovarianceControlProblem:
    """Pendulum swung from rest to a narrow Gaussian about upright."""
    sys = systems.pendulum()
    target = Gaussian(np.array([np.pi, 0.0]), np.diag([1e-3, 5e-3]))
    return CovarianceControlProblem("pendulum", sys, _input_cost(sys),
                                    Gaussian(np.asarray(x0_mean, float), 1e-4 * np.eye(2)),
                                    target, 100, 300, 10.0, np.full(1, 0.5), np.eye(1), False)


COVARIANCE_CONTROL = {"linear": linear_covariance_control, "pendulum": pendulum_covariance_control}


TASKS = {
    "pendulum": pendulum_swingup,
    "cartpole": cartpole_swingup,
    "double_cartpole": double_cartpole_swingup,
    "quadcopter": quadcopter_tracking,
}


def make_task(name: str, horizon: Optional[int] = None, **params) -> Task:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    kwargs = dict(params)
    if horizon is not None:
        kwargs["horizon"] = horizon
    return TASKS[name](**kwargs)
