"""Discrete-time stochastic systems, built-in environments and rollouts.

A system maps ``(t, x, u)`` to the mean next state; every built-in dynamics
function broadcasts over leading batch axes so that quadrature point sets can
be pushed through in one call. Process noise is additive Gaussian.

Angles are kept unwrapped. Inputs pass through a smooth tanh clamp inside the
dynamics, so the admissible input set is all of R^d_u.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState

Dynamics = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def load_defaults() -> dict:
    """Physical parameter table shipped with the package."""
    text = resources.files("i2c").joinpath("data/defaults.json").read_text()
    return json.loads(text)


def _merge_params(name: str, overrides: dict) -> dict:
    defaults = load_defaults()[name]
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        raise TypeError(f"unknown {name} parameter(s) {unknown}")
    return {**defaults, **overrides}


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (tolerates exact zeros)."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def smooth_clamp(u, lo, hi):
    """Differentiable saturation onto ``(lo, hi)`` with unit slope at the midpoint."""
    mid = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    return mid + half * np.tanh((u - mid) / half)


def smooth_clamp_inverse(v, lo, hi):
    mid = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    return mid + half * np.arctanh((v - mid) / half)


class SystemModel:
    """Stochastic dynamics ``x' = f_t(x, u) + eta`` with optional measurements.

    :param dynamics: ``f(t, x, u)`` returning the mean successor state. Must
        broadcast over a leading batch axis of ``x`` and ``u``.
    :param process_noise: ``d_x x d_x`` PSD covariance, or a callable of ``t``.
    :param jacobian: optional ``J(t, x, u)`` returning ``d_x x (d_x + d_u)``.
    :param measurement: optional ``g(t, x)`` returning ``y``.
    :param measurement_noise: ``d_y x d_y`` PD covariance for ``g``.
    """

    def __init__(
        self,
        name: str,
        dim_x: int,
        dim_u: int,
        dynamics: Dynamics,
        process_noise,
        jacobian: Optional[Callable] = None,
        measurement: Optional[Callable] = None,
        measurement_noise: Optional[np.ndarray] = None,
        dt: Optional[float] = None,
        params: Optional[dict] = None,
    ):
        self.name = name
        self.dim_x = int(dim_x)
        self.dim_u = int(dim_u)
        self.dynamics = dynamics
        self.jacobian = jacobian
        self.measurement = measurement
        self.dt = dt
        self.params = dict(params or {})
        if callable(process_noise):
            self._noise = process_noise
            self._noise_sqrt = lambda t: psd_sqrt(process_noise(t))
        else:
            S = np.array(process_noise, dtype=float).reshape(self.dim_x, self.dim_x)
            if np.any(np.linalg.eigvalsh(0.5 * (S + S.T)) < -1e-12):
                raise ValueError("process noise must be PSD")
            S.flags.writeable = False
            root = psd_sqrt(S)
            self._noise = lambda t, S=S: S
            self._noise_sqrt = lambda t, R=root: R
        if measurement is not None:
            if measurement_noise is None:
                raise ValueError("measurement model requires a noise covariance")
            R = np.array(measurement_noise, dtype=float)
            np.linalg.cholesky(R)
            R.flags.writeable = False
            self.measurement_noise = R
            self.dim_y = R.shape[0]
        else:
            self.measurement_noise = None
            self.dim_y = 0

    @property
    def dim_tau(self) -> int:
        return self.dim_x + self.dim_u

    def f(self, t, x, u):
        return self.dynamics(t, x, u)

    def f_tau(self, t, tau):
        """Dynamics as a function of the stacked state-action ``tau``."""
        return self.dynamics(t, tau[..., : self.dim_x], tau[..., self.dim_x:])

    def g(self, t, x):
        if self.measurement is None:
            raise ValueError(f"system {self.name!r} has no measurement model")
        return self.measurement(t, x)

    def noise_cov(self, t) -> np.ndarray:
        return self._noise(t)

    def noise_sqrt(self, t) -> np.ndarray:
        return self._noise_sqrt(t)

    def with_measurement_noise(self, R) -> "SystemModel":
        return SystemModel(
            self.name, self.dim_x, self.dim_u, self.dynamics, self._noise,
            self.jacobian, self.measurement, R, self.dt, self.params,
        )

    def with_process_noise(self, S) -> "SystemModel":
        return SystemModel(
            self.name, self.dim_x, self.dim_u, self.dynamics, S,
            self.jacobian, self.measurement, self.measurement_noise, self.dt, self.params,
        )


@dataclass(frozen=True)
class LinearDynamics:
    """Local affine model ``x' = F [x; u] + f_bar + eta``."""

    F: np.ndarray
    f_bar: np.ndarray
    noise: np.ndarray

    @property
    def Fx(self):
        return self.F[:, : self.F.shape[0]]

    @property
    def Fu(self):
        return self.F[:, self.F.shape[0]:]


@dataclass
class Trajectory:
    """Simulated trajectory with per-step costs.

    ``step_costs`` has one entry per input followed by the terminal cost.
    """

    states: np.ndarray
    inputs: np.ndarray
    step_costs: np.ndarray
    seed: Optional[int] = None
    measurements: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def total_cost(self):
        """Sum of ``step_costs`` (one value per row for batched rollouts)."""
        total = np.sum(self.step_costs, axis=-1)
        return float(total) if np.ndim(total) == 0 else total

    @property
    def horizon(self) -> int:
        return self.inputs.shape[-2]


def step(sys: SystemModel, t, x, u, rng=None, noise_sample=None):
    """One transition. With neither ``rng`` nor ``noise_sample`` it is noise-free."""
    x_next = np.asarray(sys.f(t, np.asarray(x, float), np.asarray(u, float)), float)
    if noise_sample is not None:
        x_next = x_next + noise_sample
    elif rng is not None:
        x_next = x_next + sys.noise_sqrt(t) @ rng.standard_normal(sys.dim_x)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"non-finite state at t={t}", t=t)
    return x_next


def numerical_jacobian(fun, z, rel_step=1e-5):
    """Central differences, one coordinate at a time.

    The step for coordinate ``i`` is ``rel_step * max(1, |z_i|)``. ``fun`` is
    only ever called on single points, so it need not be vectorized.
    """
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z), dtype=float)
    J = np.empty((f0.size, z.size))
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        J[:, i] = (np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2.0 * h)
    return f0, J


def linearize(sys: SystemModel, t, tau_bar) -> LinearDynamics:
    """Affine model of ``f_t`` about ``tau_bar = (x, u)``."""
    tau_bar = np.asarray(tau_bar, dtype=float)
    if not np.all(np.isfinite(tau_bar)):
        raise NonFiniteState("linearization point is not finite", t=t)
    dx = sys.dim_x
    if sys.jacobian is not None:
        f0 = np.asarray(sys.f(t, tau_bar[:dx], tau_bar[dx:]), float)
        F = np.asarray(sys.jacobian(t, tau_bar[:dx], tau_bar[dx:]), float)
    else:
        f0, F = numerical_jacobian(lambda z: sys.f_tau(t, z), tau_bar)
    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(F))):
        raise NonFiniteState("non-finite linearization", t=t)
    return LinearDynamics(F, f0 - F @ tau_bar, sys.noise_cov(t))


def rollout(
    sys: SystemModel,
    policy,
    x0,
    horizon: int,
    cost=None,
    seed: Optional[int] = None,
    deterministic: bool = False,
) -> Trajectory:
    """Simulate ``horizon`` steps under ``policy(t, x, rng) -> u``.

    ``x0`` is either a state vector or an object with ``sample(rng)``, in which
    case the initial state is drawn from it. Noise and any policy sampling
    come from a single generator seeded by ``seed``.
    """
    rng = np.random.default_rng(seed)
    if hasattr(x0, "sample"):
        x = np.asarray(x0.mean if deterministic else x0.sample(rng), float)
    else:
        x = np.asarray(x0, dtype=float).copy()
    X = np.empty((horizon + 1, sys.dim_x))
    U = np.empty((horizon, sys.dim_u))
    c = np.zeros(horizon + 1)
    X[0] = x
    noise_rng = None if deterministic else rng
    for t in range(horizon):
        u = np.asarray(policy(t, X[t], rng), dtype=float).reshape(sys.dim_u)
        U[t] = u
        if cost is not None:
            c[t] = cost.cost(t, X[t], u)
        try:
            X[t + 1] = step(sys, t, X[t], u, rng=noise_rng)
        except NonFiniteState as exc:
            exc.partial = Trajectory(X[: t + 1], U[: t + 1], c[: t + 1], seed)
            raise
    if cost is not None:
        c[horizon] = cost.terminal_cost(X[horizon])
    return Trajectory(X, U, c, seed)


def rollout_batch(sys: SystemModel, policy, x0, horizon: int, cost=None, seed=None,
                  deterministic: bool = False) -> Trajectory:
    """Simulate many rollouts at once from the rows of ``x0``.

    ``policy(t, X, rng)`` and ``cost`` must accept a batch of states. Returned
    arrays carry the batch on the first axis. Noise comes from one generator,
    so individual rows are not reproducible in isolation; use :func:`rollout`
    for per-seed records.
    """
    rng = np.random.default_rng(seed)
    X0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = X0.shape[0]
    X = np.empty((n, horizon + 1, sys.dim_x))
    U = np.empty((n, horizon, sys.dim_u))
    c = np.zeros((n, horizon + 1))
    X[:, 0] = X0
    for t in range(horizon):
        u = np.asarray(policy(t, X[:, t], rng), dtype=float).reshape(n, sys.dim_u)
        U[:, t] = u
        if cost is not None:
            c[:, t] = cost.cost(t, X[:, t], u)
        nxt = np.asarray(sys.f(t, X[:, t], u), dtype=float)
        if not deterministic:
            nxt = nxt + rng.standard_normal((n, sys.dim_x)) @ sys.noise_sqrt(t).T
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState(f"non-finite state at t={t}", t=t)
        X[:, t + 1] = nxt
    if cost is not None:
        c[:, horizon] = cost.terminal_cost(X[:, horizon])
    return Trajectory(X, U, c, seed)


def open_loop(U):
    U = np.asarray(U, dtype=float)
    return lambda t, x, rng=None: U[t]


def linear_feedback(K, k):
    K = np.asarray(K, dtype=float)
    k = np.asarray(k, dtype=float)
    return lambda t, x, rng=None: x @ K[t].T + k[t]


# built-in environments ---------------------------------------------------------


def affine_system(A, B, c=None, noise=None, name="affine") -> SystemModel:
    """Affine system ``x' = A_t x + B_t u + c_t``; matrices may carry a time axis."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    dx, du = A.shape[-2], B.shape[-1]
    c = np.zeros(dx) if c is None else np.asarray(c, dtype=float)
    At = (lambda t: A[t]) if A.ndim == 3 else (lambda t: A)
    Bt = (lambda t: B[t]) if B.ndim == 3 else (lambda t: B)
    ct = (lambda t: c[t]) if c.ndim == 2 else (lambda t: c)

    def dynamics(t, x, u):
        return x @ At(t).T + u @ Bt(t).T + ct(t)

    def jacobian(t, x, u):
        return np.hstack([At(t), Bt(t)])

    S = np.zeros((dx, dx)) if noise is None else noise
    return SystemModel(name, dx, du, dynamics, S, jacobian=jacobian,
                       params={"A": A, "B": B, "c": c})


def double_integrator(dt=None, noise=None) -> SystemModel:
    """Unit-mass point on a line, exact zero-order-hold discretization."""
    dt = load_defaults()["double_integrator"]["dt"] if dt is None else dt
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    sys = affine_system(A, B, noise=noise, name="double_integrator")
    sys.dt = dt
    return sys


def linear_unstable(**overrides) -> SystemModel:
    """Open-loop unstable 2-d system with two inputs."""
    p = _merge_params("linear_unstable", overrides)
    return affine_system(p["A"], p["B"], noise=np.diag(p["noise"]), name="linear_unstable")


def _semi_implicit(accel, n_pos, dt, substeps):
    """Integrate ``q'' = accel(q, v, u)`` with semi-implicit Euler sub-steps."""
    h = dt / substeps

    def dynamics(t, x, u):
        q = x[..., :n_pos]
        v = x[..., n_pos:]
        for _ in range(substeps):
            v = v + h * accel(q, v, u)
            q = q + h * v
        return np.concatenate([q, v], axis=-1)

    return dynamics


def pendulum(**overrides) -> SystemModel:
    """Torque-limited pendulum. State ``(theta, theta_dot)``; ``theta = 0`` hangs down."""
    p = _merge_params("pendulum", overrides)
    m, l, g, b, umax = p["mass"], p["length"], p["gravity"], p["damping"], p["u_max"]
    inertia = m * l * l

    def accel(q, v, u):
        torque = smooth_clamp(u[..., 0:1], -umax, umax)
        return (torque - m * g * l * np.sin(q) - b * v) / inertia

    dynamics = _semi_implicit(accel, 1, p["dt"], p["substeps"])
    return SystemModel("pendulum", 2, 1, dynamics, np.diag(p["noise"]),
                       jacobian=_pendulum_jacobian(p), dt=p["dt"], params=p)


def _pendulum_jacobian(p):
    m, l, g, b, umax = p["mass"], p["length"], p["gravity"], p["damping"], p["u_max"]
    h = p["dt"] / p["substeps"]
    inertia = m * l * l

    def jacobian(t, x, u):
        q, v = float(x[0]), float(x[1])
        # sensitivities of (q, v) w.r.t. (q0, v0, u0), chained through sub-steps
        dq = np.array([1.0, 0.0, 0.0])
        dv = np.array([0.0, 1.0, 0.0])
        torque_u = 1.0 - np.tanh(u[0] / umax) ** 2
        for _ in range(p["substeps"]):
            da = (-m * g * l * np.cos(q) * dq - b * dv
                  + np.array([0.0, 0.0, torque_u])) / inertia
            a = (smooth_clamp(u[0], -umax, umax) - m * g * l * np.sin(q) - b * v) / inertia
            v = v + h * a
            dv = dv + h * da
            q = q + h * v
            dq = dq + h * dv
        return np.vstack([dq, dv])

    return jacobian


def cartpole(**overrides) -> SystemModel:
    """Cart with a point-mass pole. State ``(x, theta, x_dot, theta_dot)``; ``theta = 0`` hangs down."""
    p = _merge_params("cartpole", overrides)
    M, m, l, g = p["cart_mass"], p["pole_mass"], p["length"], p["gravity"]
    bc, bp, umax = p["cart_damping"], p["pole_damping"], p["u_max"]

    def accel(q, v, u):
        th = q[..., 1]
        xd, thd = v[..., 0], v[..., 1]
        force = smooth_clamp(u[..., 0], -umax, umax)
        s, c = np.sin(th), np.cos(th)
        m11, m12, m22 = M + m, m * l * c, m * l * l
        r1 = force + m * l * thd ** 2 * s - bc * xd
        r2 = -m * g * l * s - bp * thd
        det = m11 * m22 - m12 * m12
        return np.stack([(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det], axis=-1)

    dynamics = _semi_implicit(accel, 2, p["dt"], p["substeps"])
    return SystemModel("cartpole", 4, 1, dynamics, np.diag(p["noise"]), dt=p["dt"], params=p)


def double_cartpole(**overrides) -> SystemModel:
    """Cart with two chained point-mass poles.

    State ``(x, theta1, theta2, x_dot, theta1_dot, theta2_dot)`` with absolute
    pole angles measured from the downward vertical.
    """
    p = _merge_params("double_cartpole", overrides)
    M, m1, m2 = p["cart_mass"], p["mass_1"], p["mass_2"]
    l1, l2, g = p["length_1"], p["length_2"], p["gravity"]
    bc, bp, umax = p["cart_damping"], p["pole_damping"], p["u_max"]

    def accel(q, v, u):
        t1, t2 = q[..., 1], q[..., 2]
        xd, w1, w2 = v[..., 0], v[..., 1], v[..., 2]
        force = smooth_clamp(u[..., 0], -umax, umax)
        c1, s1, c2, s2 = np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)
        c12, s12 = np.cos(t1 - t2), np.sin(t1 - t2)
        mass = np.empty(t1.shape + (3, 3))
        mass[..., 0, 0] = M + m1 + m2
        mass[..., 0, 1] = mass[..., 1, 0] = (m1 + m2) * l1 * c1
        mass[..., 0, 2] = mass[..., 2, 0] = m2 * l2 * c2
        mass[..., 1, 1] = (m1 + m2) * l1 * l1
        mass[..., 1, 2] = mass[..., 2, 1] = m2 * l1 * l2 * c12
        mass[..., 2, 2] = m2 * l2 * l2
        rhs = np.stack([
            force + (m1 + m2) * l1 * w1 ** 2 * s1 + m2 * l2 * w2 ** 2 * s2 - bc * xd,
            -m2 * l1 * l2 * w2 ** 2 * s12 - (m1 + m2) * g * l1 * s1 - bp * w1,
            m2 * l1 * l2 * w1 ** 2 * s12 - m2 * g * l2 * s2 - bp * (w2 - w1),
        ], axis=-1)
        return np.linalg.solve(mass, rhs[..., None])[..., 0]

    dynamics = _semi_implicit(accel, 3, p["dt"], p["substeps"])
    return SystemModel("double_cartpole", 6, 1, dynamics, np.diag(p["noise"]),
                       dt=p["dt"], params=p)


def quadcopter(noise_level: str = "low", **overrides) -> SystemModel:
    """Planar quadcopter with left/right rotor thrusts.

    State ``(px, pz, phi, vx, vz, omega)``. The measurement is the position and
    velocity of the left and right rotor in the world frame. With
    ``noise_level="high"`` all velocities and the right rotor position are
    effectively masked by a very large measurement variance.
    """
    p = _merge_params("quadcopter", overrides)
    m, arm, inertia, g = p["mass"], p["arm"], p["inertia"], p["gravity"]
    tmax = p["thrust_max"]
    dt, n_sub = p["dt"], p["substeps"]
    h = dt / n_sub

    def accel(q, u):
        phi = q[..., 2]
        thrust = smooth_clamp(u, 0.0, tmax)
        total = thrust[..., 0] + thrust[..., 1]
        return np.stack([
            -total * np.sin(phi) / m,
            total * np.cos(phi) / m - g,
            (thrust[..., 1] - thrust[..., 0]) * arm / inertia,
        ], axis=-1)

    def dynamics(t, x, u):
        q, v = x[..., :3], x[..., 3:]
        for _ in range(n_sub):
            v = v + h * accel(q, u)
            q = q + h * v
        return np.concatenate([q, v], axis=-1)

    def jacobian(t, x, u):
        q, v = x[:3].astype(float), x[3:].astype(float)
        dq = np.hstack([np.eye(3), np.zeros((3, 5))])
        dv = np.hstack([np.zeros((3, 3)), np.eye(3), np.zeros((3, 2))])
        thrust = smooth_clamp(u, 0.0, tmax)
        dthrust = 1.0 - np.tanh((u - 0.5 * tmax) / (0.5 * tmax)) ** 2
        for _ in range(n_sub):
            phi = q[2]
            total = thrust.sum()
            da = np.zeros((3, 8))
            da[0, 2] = -total * np.cos(phi) / m
            da[1, 2] = -total * np.sin(phi) / m
            da[0, 6:] = -np.sin(phi) / m * dthrust
            da[1, 6:] = np.cos(phi) / m * dthrust
            da[2, 6:] = np.array([-1.0, 1.0]) * arm / inertia * dthrust
            dacc = da[:, 2:3] * dq[2:3, :]
            dacc[:, 6:] += da[:, 6:]
            v = v + h * accel(q, u)
            dv = dv + h * dacc
            q = q + h * v
            dq = dq + h * dv
        return np.vstack([dq, dv])

    def measurement(t, x):
        px, pz, phi = x[..., 0], x[..., 1], x[..., 2]
        vx, vz, om = x[..., 3], x[..., 4], x[..., 5]
        c, s = arm * np.cos(phi), arm * np.sin(phi)
        return np.stack([
            px - c, pz - s, px + c, pz + s,
            vx + s * om, vz - c * om, vx - s * om, vz + c * om,
        ], axis=-1)

    R = quadcopter_measurement_noise(noise_level, p)
    return SystemModel("quadcopter", 6, 2, dynamics, np.diag(p["noise"]), jacobian=jacobian,
                       measurement=measurement, measurement_noise=R, dt=dt, params=p)


def quadcopter_measurement_noise(level: str, params: Optional[dict] = None) -> np.ndarray:
    p = params or load_defaults()["quadcopter"]
    r = np.full(8, p["measurement_noise_low"])
    if level == "high":
        # right rotor position and every velocity channel
        r[[2, 3, 4, 5, 6, 7]] = p["measurement_noise_masked"]
    elif level != "low":
        raise ValueError(f"noise level must be 'low' or 'high', got {level!r}")
    return np.diag(r)


def hover_thrust(params: Optional[dict] = None) -> float:
    """Raw per-rotor input whose clamped thrust balances gravity."""
    p = params or load_defaults()["quadcopter"]
    return float(smooth_clamp_inverse(0.5 * p["mass"] * p["gravity"], 0.0, p["thrust_max"]))


ENVIRONMENTS = {
    "double_integrator": double_integrator,
    "linear_unstable": linear_unstable,
    "pendulum": pendulum,
    "cartpole": cartpole,
    "double_cartpole": double_cartpole,
    "quadcopter": quadcopter,
}
