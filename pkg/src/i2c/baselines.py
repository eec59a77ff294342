"""Reference solvers: Riccati LQR, risk-sensitive LQR, iLQR, CEM and Gauss-Newton-as-inference.

Quadratic models are written over ``tau = (x, u)``:
``C(tau) = 1/2 tau^T C tau + c^T tau + c0`` and ``x' = F tau + f + eta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import time
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .costs import QuadraticFeatureCost
from .errors import IndefiniteQuu, RiskInfeasible, SingularCovariance
from .gaussian import Gaussian, cholesky, symmetrize
from .inference import Linearize, MomentPropagator
from .systems import LinearDynamics, SystemModel, linearize, numerical_jacobian, psd_sqrt


@dataclass
class QuadraticCost:
    """Per-step quadratic coefficients; ``terminal`` is over ``x`` only."""

    C: np.ndarray  # (H, d_tau, d_tau)
    c: np.ndarray  # (H, d_tau)
    C_T: np.ndarray
    c_T: np.ndarray
    c0: Optional[np.ndarray] = None
    c0_T: float = 0.0

    @property
    def horizon(self) -> int:
        return self.C.shape[0]


@dataclass
class QuadraticValue:
    """Value ``V(x) = 1/2 x^T V x + v^T x + v0`` and state-action value ``Q``."""

    V: np.ndarray  # (H + 1, d_x, d_x)
    v: np.ndarray
    v0: np.ndarray
    Q: np.ndarray  # (H, d_tau, d_tau)
    q: np.ndarray
    q0: np.ndarray

    def value(self, t, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.V[t] @ x + self.v[t] @ x + self.v0[t])


def quadratic_cost_from_features(cost: QuadraticFeatureCost, horizon, dim_x, dim_u, nominal=None):
    """Gauss-Newton quadratic model of a feature cost about ``nominal``.

    ``nominal = (X, U)`` with ``X`` of length ``horizon + 1``; zeros by default.
    The model is exact for affine features and expressed in absolute
    coordinates.
    """
    Cs, cs, c0s = [], [], []
    X = U = None
    if nominal is not None:
        X, U = nominal
    for t in range(horizon):
        tau = np.zeros(dim_x + dim_u) if nominal is None else np.concatenate([X[t], U[t]])
        h = lambda z, t=t: cost.features(t, z[:dim_x], z[dim_x:])
        C, c, c0 = _gauss_newton(h, tau, cost.running_target(t), cost.running_weight(t))
        Cs.append(C)
        cs.append(c)
        c0s.append(c0)
    xT = np.zeros(dim_x) if nominal is None else X[horizon]
    C_T, c_T, c0_T = _gauss_newton(cost.terminal_features, xT, cost.terminal_target,
                                   cost.terminal_weight)
    return QuadraticCost(np.array(Cs), np.array(cs), C_T, c_T, np.array(c0s), c0_T)


def _gauss_newton(h, z0, target, W):
    """``1/2 (target - h(z))^T W (target - h(z))`` expanded to second order in ``z``."""
    h0, J = numerical_jacobian(h, z0)
    r = target - h0 + J @ z0  # residual as an affine function: r(z) = r - J z
    C = J.T @ W @ J
    c = -J.T @ W @ r
    c0 = 0.5 * r @ W @ r
    return symmetrize(C), c, c0


def _affine_terms(dyn: LinearDynamics, V, v, v0):
    """Expected next-step value pulled back through ``x' = F tau + f + eta``."""
    F, f, S = dyn.F, dyn.f_bar, dyn.noise
    Q = F.T @ V @ F
    q = F.T @ (V @ f + v)
    q0 = 0.5 * f @ V @ f + v @ f + v0 + 0.5 * np.sum(V * S)
    return Q, q, q0


def _backward(dyn: Sequence[LinearDynamics], cost: QuadraticCost, regularizer=None, mu=0.0):
    H = cost.horizon
    dx = cost.C_T.shape[0]
    dt = cost.C.shape[1]
    du = dt - dx
    V = np.empty((H + 1, dx, dx))
    v = np.empty((H + 1, dx))
    v0 = np.empty(H + 1)
    Q = np.empty((H, dt, dt))
    q = np.empty((H, dt))
    q0 = np.empty(H)
    K = np.empty((H, du, dx))
    k = np.empty((H, du))
    V[H], v[H], v0[H] = cost.C_T, cost.c_T, cost.c0_T
    c0 = np.zeros(H) if cost.c0 is None else cost.c0
    for t in range(H - 1, -1, -1):
        Vn, vn = V[t + 1], v[t + 1]
        if regularizer is not None:
            Vn, vn = regularizer(dyn[t], Vn, vn)
        Qd, qd, q0d = _affine_terms(dyn[t], Vn, vn, v0[t + 1])
        Qt = symmetrize(cost.C[t] + Qd)
        qt = cost.c[t] + qd
        Quu = Qt[dx:, dx:] + mu * np.eye(du)
        Qux = Qt[dx:, :dx]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            raise IndefiniteQuu(f"Q_uu not positive definite at t={t}") from None
        K[t] = -linalg.cho_solve((L, True), Qux, check_finite=False)
        k[t] = -linalg.cho_solve((L, True), qt[dx:], check_finite=False)
        Q[t], q[t], q0[t] = Qt, qt, c0[t] + q0d
        V[t] = symmetrize(Qt[:dx, :dx] + Qux.T @ K[t])
        v[t] = qt[:dx] + Qux.T @ k[t]
        v0[t] = q0[t] + 0.5 * k[t] @ qt[dx:]
    return K, k, QuadraticValue(V, v, v0, Q, q, q0)


def lqr_backward(dyn: Sequence[LinearDynamics], cost: QuadraticCost):
    """Riccati recursion. Returns ``(K, k, QuadraticValue)`` with ``u = K x + k``.

    Process noise only shifts the constant ``v0``.
    """
    return _backward(dyn, cost)


def risk_adjusted_value(V, v, noise, sigma):
    """``(V^-1 + sigma Sigma)^-1`` and the matching linear term.

    Written in Woodbury form so that singular ``V`` or ``Sigma`` are allowed.
    """
    if sigma == 0 or not np.any(noise):
        return V, v
    S = psd_sqrt(noise)
    M = np.eye(V.shape[0]) + sigma * S @ V @ S
    M = symmetrize(M)
    if np.linalg.eigvalsh(M)[0] <= 0:
        raise RiskInfeasible(f"risk parameter {sigma} makes the value regularizer indefinite")
    VS = V @ S
    G = np.linalg.solve(M, VS.T)
    return symmetrize(V - sigma * VS @ G), v - sigma * (S @ G).T @ v


def risk_sensitive_backward(dyn: Sequence[LinearDynamics], cost: QuadraticCost, sigma: float):
    """Riccati recursion with the risk-adjusted value; ``sigma > 0`` is risk seeking."""

    def regularize(d, V, v):
        return risk_adjusted_value(V, v, d.noise, sigma)

    return _backward(dyn, cost, regularizer=regularize)


def linear_dynamics_list(sys: SystemModel, horizon, nominal=None):
    dx, du = sys.dim_x, sys.dim_u
    out = []
    for t in range(horizon):
        tau = np.zeros(dx + du) if nominal is None else np.concatenate([nominal[0][t], nominal[1][t]])
        out.append(linearize(sys, t, tau))
    return out


# iLQR ---------------------------------------------------------------------------


@dataclass
class IlqrResult:
    states: np.ndarray
    inputs: np.ndarray
    K: np.ndarray
    k: np.ndarray
    cost_trace: list
    converged: bool = False
    line_search_failed: bool = False
    iteration_seconds: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.cost_trace[-1]


def _nominal_rollout(sys, cost, x0, U):
    X = np.empty((U.shape[0] + 1, sys.dim_x))
    X[0] = x0
    total = 0.0
    for t in range(U.shape[0]):
        total += float(cost.cost(t, X[t], U[t]))
        X[t + 1] = sys.f(t, X[t], U[t])
    total += float(cost.terminal_cost(X[-1]))
    return X, total


def ilqr_solve(sys: SystemModel, cost: QuadraticFeatureCost, x0, horizon, max_iters=100,
               U_init=None, mu0=1e-6, tol=1e-8, max_halvings=10):
    """Iterative LQR with a Gauss-Newton cost model.

    The backward pass regularizes ``Q_uu`` with ``mu I`` (doubled from
    ``mu0`` on failure, halved on success); the forward pass backtracks on the
    feedforward step over ``1, 1/2, ..., 2^-max_halvings`` and accepts only cost
    decreases. On line-search failure the best iterate is returned with
    ``line_search_failed`` set.
    """
    x0 = np.asarray(x0, dtype=float)
    dx, du = sys.dim_x, sys.dim_u
    U = np.zeros((horizon, du)) if U_init is None else np.array(U_init, dtype=float)
    X, J = _nominal_rollout(sys, cost, x0, U)
    if not np.isfinite(J):
        raise SingularCovariance("initial rollout is not finite")
    trace = [J]
    mu = mu0
    res = IlqrResult(X, U, np.zeros((horizon, du, dx)), np.zeros((horizon, du)), trace)
    for _ in range(max_iters):
        start = time.perf_counter()
        dyn = []
        for t in range(horizon):
            d = linearize(sys, t, np.concatenate([X[t], U[t]]))
            dyn.append(LinearDynamics(d.F, np.zeros(dx), np.zeros((dx, dx))))
        quad = quadratic_cost_from_features(cost, horizon, dx, du, (X, U))
        quad = _shift_to_deviations(quad, X, U)
        while True:
            try:
                K, k, _ = _backward(dyn, quad, mu=mu)
                break
            except IndefiniteQuu:
                mu = max(2.0 * mu, mu0)
                if mu > 1e10:
                    raise
        accepted = False
        eps = 1.0
        for _ in range(max_halvings + 1):
            Xn = np.empty_like(X)
            Un = np.empty_like(U)
            Xn[0] = x0
            Jn = 0.0
            for t in range(horizon):
                Un[t] = U[t] + eps * k[t] + K[t] @ (Xn[t] - X[t])
                Jn += float(cost.cost(t, Xn[t], Un[t]))
                Xn[t + 1] = sys.f(t, Xn[t], Un[t])
            Jn += float(cost.terminal_cost(Xn[-1]))
            if np.isfinite(Jn) and Jn < J:
                accepted = True
                break
            eps *= 0.5
        res.iteration_seconds.append(time.perf_counter() - start)
        if not accepted:
            res.line_search_failed = True
            res.K, res.k = K, k
            break
        improvement = (J - Jn) / max(abs(J), 1e-300)
        X, U, J = Xn, Un, Jn
        trace.append(J)
        mu = max(0.5 * mu, mu0)
        res.states, res.inputs, res.K, res.k = X, U, K, k
        if improvement < tol:
            res.converged = True
            break
    res.states, res.inputs = X, U
    return res


def _shift_to_deviations(quad: QuadraticCost, X, U):
    """Re-express an absolute-coordinate quadratic model in deviations from ``(X, U)``."""
    H = quad.horizon
    c = np.empty_like(quad.c)
    for t in range(H):
        tau = np.concatenate([X[t], U[t]])
        c[t] = quad.c[t] + quad.C[t] @ tau
    c_T = quad.c_T + quad.C_T @ X[H]
    return QuadraticCost(quad.C, c, quad.C_T, c_T)


# CEM ----------------------------------------------------------------------------


@dataclass
class CemResult:
    mean: np.ndarray
    std: np.ndarray
    best_inputs: np.ndarray
    best_cost: float
    elite_mean_costs: list
    elite_indices: list
    iteration_seconds: list = field(default_factory=list)


def cem_solve(sys: SystemModel, cost: QuadraticFeatureCost, x0, horizon, n=50, elites=None,
              iters=20, seed=0, mean=None, std=1.0, var_floor=1e-6, clip=None):
    """Cross-entropy method over open-loop input sequences.

    Candidates are ranked by their true (not exponentiated) cost and a
    diagonal Gaussian is refit to the elites each iteration.
    """
    if elites is None:
        elites = max(2, int(round(0.1 * n)))
    if not n >= elites >= 2:
        raise ValueError("need n >= elites >= 2")
    du = sys.dim_u
    rng = np.random.default_rng(seed)
    mu = np.zeros((horizon, du)) if mean is None else np.array(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(std, dtype=float), (horizon, du)).copy()
    best_u, best_c = mu.copy(), np.inf
    res = CemResult(mu, sd, best_u, best_c, [], [])
    x0 = np.asarray(x0, dtype=float)
    for _ in range(iters):
        start = time.perf_counter()
        U = mu + sd * rng.standard_normal((n, horizon, du))
        if clip is not None:
            U = np.clip(U, *clip)
        costs = _batch_cost(sys, cost, x0, U)
        costs = np.where(np.isfinite(costs), costs, np.inf)
        order = np.argsort(costs, kind="stable")[:elites]
        E = U[order]
        mu = E.mean(axis=0)
        sd = np.sqrt(np.maximum(E.var(axis=0), var_floor))
        if costs[order[0]] < best_c:
            best_c, best_u = float(costs[order[0]]), U[order[0]].copy()
        res.elite_mean_costs.append(float(np.mean(costs[order])))
        res.elite_indices.append(order.copy())
        res.iteration_seconds.append(time.perf_counter() - start)
    res.mean, res.std, res.best_inputs, res.best_cost = mu, sd, best_u, best_c
    return res


def _batch_cost(sys, cost, x0, U):
    n, H, _ = U.shape
    X = np.broadcast_to(x0, (n, x0.size)).copy()
    total = np.zeros(n)
    with np.errstate(all="ignore"):
        for t in range(H):
            total += cost.cost(t, X, U[:, t])
            X = sys.f(t, X, U[:, t])
        total += cost.terminal_cost(X)
    return total


# Gauss-Newton as inference --------------------------------------------------------


@dataclass
class InverseResult:
    means: list
    covs: list
    residuals: list
    alphas: list
    clamp_active: list
    label: str = ""


def classify_trace(residuals, tol=1e-6) -> str:
    """``converged`` below ``tol``; ``diverged`` if non-finite or worse than the
    start; ``stalled`` otherwise."""
    r = np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(r)):
        return "diverged"
    if r[-1] < tol:
        return "converged"
    if r[-1] > r[0]:
        return "diverged"
    return "stalled"


def gauss_newton_inference(f, y_star, prior: Gaussian, mode="em", iters=50, alpha=1.0,
                           theta=0.0, gamma=2.0, propagator: Optional[MomentPropagator] = None,
                           tol=1e-6):
    """Solve ``min |y* - f(x)|^2`` by repeated Gaussian conditioning.

    ``mode="em"``: the prior is replaced by the posterior each iteration, the
    moments of ``f`` are taken under the current belief and ``alpha`` is
    re-estimated from the expected squared residual (ratio-clamped by
    ``gamma``). ``alpha`` is calibrated from the prior when ``alpha`` is None.

    ``mode="iterated"``: the prior and ``alpha`` stay fixed and ``f`` is
    relinearized about ``x_hat_i = theta x_hat_{i-1} + (1 - theta) mu_post``.

    The returned residuals are ``|y* - f(mu_i)|`` starting from the prior mean.
    """
    y_star = np.atleast_1d(np.asarray(y_star, dtype=float))
    fv = lambda x: np.atleast_1d(np.asarray(f(x), dtype=float))
    prop = propagator or Linearize()
    dy = y_star.size
    mu, S = prior.mean.copy(), prior.cov.copy()
    res = InverseResult([mu.copy()], [S.copy()], [float(np.linalg.norm(y_star - fv(mu)))], [], [])

    def expected_sq(m, C):
        ym, yS, _ = prop.propagate_arrays(fv, m, C)
        r = y_star - ym
        return float(r @ r + np.trace(yS))

    if mode == "em":
        if alpha is None:
            alpha = dy / expected_sq(mu, S)
        for _ in range(iters):
            ym, yS, xy = prop.propagate_arrays(fv, mu, S, np.eye(dy) / alpha)
            G = linalg.solve(yS, xy.T, assume_a="pos").T
            mu = mu + G @ (y_star - ym)
            S = symmetrize(S - G @ xy.T)
            cholesky(S)
            h = expected_sq(mu, S)
            clamped = False
            if h > 0:
                raw = dy / h
                lo, hi = alpha / gamma, alpha * gamma
                new = min(max(raw, lo), hi)
                clamped = new != raw
                alpha = new
            res.alphas.append(alpha)
            res.clamp_active.append(clamped)
            res.means.append(mu.copy())
            res.covs.append(S.copy())
            r = float(np.linalg.norm(y_star - fv(mu)))
            res.residuals.append(r)
            if not np.isfinite(r) or r < tol * 1e-3:
                break
    elif mode == "iterated":
        m0, S0 = prior.mean, prior.cov
        x_hat = m0.copy()
        R = np.eye(dy) / alpha
        for _ in range(iters):
            with np.errstate(all="ignore"):
                y0, J = numerical_jacobian(fv, x_hat)
            if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(J))):
                res.residuals.append(float("inf"))
                break
            Syy = J @ S0 @ J.T + R
            Sxy = S0 @ J.T
            G = linalg.solve(Syy, Sxy.T, assume_a="pos").T
            mu = m0 + G @ (y_star - y0 - J @ (m0 - x_hat))
            S = symmetrize(S0 - G @ Sxy.T)
            x_hat = theta * x_hat + (1.0 - theta) * mu
            res.alphas.append(alpha)
            res.clamp_active.append(False)
            res.means.append(mu.copy())
            res.covs.append(S.copy())
            with np.errstate(all="ignore"):
                r = float(np.linalg.norm(y_star - fv(mu)))
            res.residuals.append(r if np.isfinite(r) else float("inf"))
            if not np.isfinite(r):
                break
    else:
        raise ValueError("mode must be 'em' or 'iterated'")
    res.label = classify_trace(res.residuals, tol)
    return res


def reference_inverse_problem():
    """Scalar non-convex test function, target and prior used by the demo."""
    f = lambda x: x ** 3 - 2.0 * x + 2.0 * np.sin(3.0 * x)
    return f, np.array([0.0]), Gaussian(np.array([2.0]), np.array([[4.0]]))
