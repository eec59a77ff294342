"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers before asserting, so the verdicts show up in a plain ``pytest -v`` log.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from i2c import systems, tasks
from i2c.baselines import (QuadraticCost, gauss_newton_inference, lqr_backward,
                           reference_inverse_problem, risk_sensitive_backward)
from i2c.cli import bench_timing
from i2c.costs import QuadraticFeatureCost, state_features, state_input_features
from i2c.duality import duality_report
from i2c.estimation_mpc import MpcConfig, run_seeds
from i2c.gaussian import Gaussian
from i2c.inference import Cubature, GaussHermite, Linearize, propagate
from i2c.solver import I2cConfig, covariance_control_solve, e_step, solve, temperature_update
from i2c.systems import LinearDynamics, rollout, rollout_batch

from conftest import random_spd

TESTS = Path(__file__).parent


@pytest.fixture
def report(capsys):
    def emit(number, clauses, seconds, limit):
        clauses = dict(clauses)
        clauses[f"runtime {seconds:.1f}s < {limit}s"] = seconds < limit
        ok = all(clauses.values())
        detail = "; ".join(f"{k} [{'ok' if v else 'FAILED'}]" for k, v in clauses.items())
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} :: {detail}")
        return ok
    return emit


def controllable(A, B):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.linalg.matrix_rank(np.hstack(blocks)) == n


def random_controllable(rng, dx, du):
    while True:
        A = np.eye(dx) + 0.2 * rng.standard_normal((dx, dx))
        B = rng.standard_normal((dx, du))
        if controllable(A, B):
            return A, B


def test_criterion_01_lqg_duality(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"q_update": 0.0, "gain": 0.0, "v_update": 0.0}
    for _ in range(20):
        dx, du = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        A, B = random_controllable(rng, dx, du)
        sys_ = systems.affine_system(A, B, c=0.1 * rng.standard_normal(dx))
        cost = QuadraticFeatureCost(state_input_features(), rng.standard_normal(dx + du),
                                    random_spd(rng, dx + du), state_features(),
                                    rng.standard_normal(dx), random_spd(rng, dx))
        r = duality_report(sys_, cost, rng.standard_normal(dx), 50, prior_scale=1e6,
                           noise_scale=1e-9)
        for key in worst:
            worst[key] = max(worst[key], getattr(r, key))
    seconds = time.perf_counter() - start
    assert report(1, {f"{k} {v:.2e} < 1e-3": v < 1e-3 for k, v in worst.items()}, seconds, 10)


def test_criterion_02_quadrature_accuracy(report):
    start = time.perf_counter()
    g = Gaussian([0.5], [[0.25]])
    y = np.sin(0.5 + 0.5 * np.random.default_rng(2024).standard_normal(1_000_000))
    mc_mean, mc_var = y.mean(), y.var(ddof=1)
    gh = propagate(GaussHermite(4), np.sin, g)
    cub = propagate(Cubature(), np.sin, g)
    lin = propagate(Linearize(), np.sin, g)
    err = lambda j: (abs(j.mean_b[0] - mc_mean), abs(j.cov_b[0, 0] - mc_var))
    (gm, gv), (cm, cv), (lm, _) = err(gh), err(cub), err(lin)
    seconds = time.perf_counter() - start
    assert report(2, {
        f"gh:4 mean {gm:.1e} < 1e-3": gm < 1e-3,
        f"gh:4 var {gv:.1e} < 1e-2": gv < 1e-2,
        f"cubature mean {cm:.1e} < 1e-2": cm < 1e-2,
        f"cubature var {cv:.1e} < 5e-2": cv < 5e-2,
        f"linearize mean {lm:.1e} > cubature mean": lm > cm,
    }, seconds, 30)


def test_criterion_03_risk_sensitive_limit(report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    H, worst = 30, 0.0
    for _ in range(10):
        dx, du = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        A, B = random_controllable(rng, dx, du)
        dyn = [LinearDynamics(np.hstack([A, B]), np.zeros(dx), 0.1 * random_spd(rng, dx))] * H
        cost = QuadraticCost(np.tile(random_spd(rng, dx + du), (H, 1, 1)),
                             np.tile(rng.standard_normal(dx + du), (H, 1)),
                             random_spd(rng, dx), rng.standard_normal(dx))
        K, _, _ = lqr_backward(dyn, cost)
        for sigma in (1e-9, -1e-9):
            Ks = risk_sensitive_backward(dyn, cost, sigma)[0]
            worst = max(worst, float(np.abs(Ks - K).max()))
    scalar_dyn = [LinearDynamics(np.array([[1.2, 1.0]]), np.zeros(1), np.array([[0.5]]))] * H
    scalar_cost = QuadraticCost(np.tile(np.eye(2), (H, 1, 1)), np.zeros((H, 2)), np.eye(1),
                                np.zeros(1))
    gains = [abs(risk_sensitive_backward(scalar_dyn, scalar_cost, s)[0][0, 0, 0])
             for s in np.linspace(0.25, 5.0, 20)]
    monotone = bool(np.all(np.diff(gains) <= 0))
    seconds = time.perf_counter() - start
    assert report(3, {f"max |K_sigma - K_lqr| {worst:.1e} < 1e-6": worst < 1e-6,
                      "scalar gain non-increasing in sigma": monotone}, seconds, 5)


def test_criterion_04_em_behaviour(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    problems = [(systems.double_integrator(noise=1e-6 * np.eye(2)),
                 QuadraticFeatureCost(state_input_features(), np.zeros(3),
                                      np.diag([1.0, 1.0, 0.1]), state_features(), np.zeros(2),
                                      10 * np.eye(2)), np.array([1.0, 0.0]))]
    for _ in range(2):
        A, B = random_controllable(rng, 3, 1)
        cost = QuadraticFeatureCost(state_input_features(), rng.standard_normal(4),
                                    random_spd(rng, 4), state_features(),
                                    rng.standard_normal(3), random_spd(rng, 3))
        problems.append((systems.affine_system(A, B, noise=1e-6 * np.eye(3)), cost,
                         rng.standard_normal(3)))
    worst_rise = -np.inf
    for sys_, cost, m0 in problems:
        config = I2cConfig(horizon=20, iterations=50, propagator=Linearize(), tol=0.0,
                           patience=50)
        _, _, diag = solve(config, sys_, cost, Gaussian(m0, 1e-4 * np.eye(m0.size)))
        trace = np.array(diag.expected_cost)
        assert trace.size == 50
        worst_rise = max(worst_rise, float(np.max(np.diff(trace) / np.abs(trace[:-1]))))

    # one time step, running cost only: alpha = d_z / h_hat with h_hat computed from
    # the smoothed joint moments directly
    sys_, cost, m0 = problems[1]
    config = I2cConfig(horizon=1, propagator=Linearize())
    belief = e_step(config, sys_, cost, config.prior_policy(3, 1), 2.0,
                    Gaussian(m0, 0.1 * np.eye(3)))
    r, W = belief.post_mean[0] - cost.running_target(0), cost.running_weight(0)
    h_hat = r @ W @ r + np.trace(W @ belief.post_cov[0])
    alpha = temperature_update(cost, belief, terminal=False)
    alpha_gap = abs(alpha - 4 / h_hat) / (4 / h_hat)
    seconds = time.perf_counter() - start
    assert report(4, {f"relative cost rise {worst_rise:.1e} <= 1e-8": worst_rise <= 1e-8,
                      f"single-step alpha vs d_z/h_hat rel {alpha_gap:.1e}": alpha_gap < 1e-12},
                  seconds, 5)


def swingup(task, threshold, iterations=200):
    config = I2cConfig(horizon=task.horizon, iterations=iterations, propagator=Cubature(),
                       input_mean=task.input_mean, input_cov=task.input_cov, mode="expert")
    policy, _, _ = solve(config, task.system, task.cost, task.x0)
    medians, successes = {}, {}
    for mode in ("ff", "fb", "expert"):
        costs, errors = [], []
        for seed in range(100):
            tr = rollout(task.system, policy.controller(mode), task.x0, task.horizon,
                         cost=task.cost, seed=seed)
            costs.append(tr.total_cost)
            errors.append(task.goal_error(tr.states[-1]))
        medians[mode] = float(np.median(costs))
        successes[mode] = int(np.sum(np.array(errors) < threshold))
    return medians, successes


def swingup_clauses(medians, successes, needed, threshold):
    best = min(medians["ff"], medians["fb"])
    return {
        f"expert {successes['expert']}/100 within {threshold} rad >= {needed}":
            successes["expert"] >= needed,
        f"expert median {medians['expert']:.1f} <= 1.1 x min(ff {medians['ff']:.1f}, "
        f"fb {medians['fb']:.1f})": medians["expert"] <= 1.1 * best,
    }


@pytest.mark.slow
def test_criterion_05_pendulum_swingup(report):
    start = time.perf_counter()
    medians, successes = swingup(tasks.make_task("pendulum"), 0.1)
    seconds = time.perf_counter() - start
    assert report(5, swingup_clauses(medians, successes, 80, 0.1), seconds, 300)


@pytest.mark.slow
def test_criterion_06_cartpole_swingup(report):
    start = time.perf_counter()
    medians, successes = swingup(tasks.make_task("cartpole"), 0.15)
    seconds = time.perf_counter() - start
    assert report(6, swingup_clauses(medians, successes, 70, 0.15), seconds, 600)


def test_criterion_07_linear_covariance_control(report):
    start = time.perf_counter()
    p = tasks.linear_covariance_control()
    noise = p.system.noise_cov(0)
    config = I2cConfig(horizon=p.horizon, iterations=p.iterations, propagator=Linearize(),
                       input_mean=p.input_mean, input_cov=p.input_cov)
    _, _, diag = covariance_control_solve(config, p.system, p.cost, p.x0, p.target, p.alpha)
    kl = diag.kl[-1]
    seconds = time.perf_counter() - start
    assert report(7, {"process noise diag(0.1, 0.1)": np.allclose(noise, 0.1 * np.eye(2)),
                      f"KL {kl:.1e} <= 1e-3": kl <= 1e-3}, seconds, 5)


@pytest.mark.slow
def test_criterion_08_pendulum_covariance_control(report):
    start = time.perf_counter()
    decreasing, mean_ok = 0, None
    for seed in range(5):
        x0_mean = np.random.default_rng(seed).normal(0.0, 0.05, 2) if seed else np.zeros(2)
        p = tasks.pendulum_covariance_control(x0_mean)
        config = I2cConfig(horizon=p.horizon, iterations=p.iterations,
                           input_mean=p.input_mean, input_cov=p.input_cov)
        policy, _, diag = covariance_control_solve(config, p.system, p.cost, p.x0, p.target,
                                                   p.alpha)
        kl = np.array(diag.kl)
        # decreasing over annealing: sampled at each tenth of the schedule, ignoring
        # rises below round-off at the initial KL scale once it has reached zero
        checkpoints = kl[np.linspace(0, int(0.8 * kl.size), 11).astype(int)]
        roundoff = np.finfo(float).eps * kl[0]
        if np.all(np.isfinite(kl)) and np.all(np.diff(checkpoints) <= roundoff):
            decreasing += 1
        if seed == 0:
            X0 = np.random.default_rng(0).multivariate_normal(p.x0.mean, p.x0.cov, 1000)
            tr = rollout_batch(p.system, policy.controller("fb", stochastic=True), X0,
                               p.horizon, seed=0)
            XT = tr.states[:, -1]
            se = XT.std(axis=0, ddof=1) / np.sqrt(XT.shape[0])
            z = np.abs(XT.mean(axis=0) - p.target.mean) / se
            mean_ok = bool(np.all(z < 3))
    seconds = time.perf_counter() - start
    assert report(8, {f"terminal mean within 3 se (z = {np.round(z, 2)})": mean_ok,
                      f"KL finite and decreasing in {decreasing}/5 seeds": decreasing >= 4},
                  seconds, 300)


@pytest.mark.slow
def test_criterion_09_timing_ordering(report):
    start = time.perf_counter()
    table = {name: sec for name, sec, _ in bench_timing()}
    cub = table["i2c(cubature)"]
    seconds = time.perf_counter() - start
    assert report(9, {f"cubature {cub:.3f}s < {name} {table[name]:.3f}s": cub < table[name]
                      for name in ("i2c(linearize)", "i2c(gh:4)", "ilqr")}, seconds, 600)


def test_criterion_10_inverse_demo(report):
    start = time.perf_counter()
    f, y, prior = reference_inverse_problem()
    em = gauss_newton_inference(f, y, prior, mode="em", iters=50, alpha=None)
    big = gauss_newton_inference(f, y, prior, mode="iterated", alpha=1e3)
    small = gauss_newton_inference(f, y, prior, mode="iterated", alpha=1e-3)
    seconds = time.perf_counter() - start
    assert report(10, {
        f"EM residual {em.residuals[-1]:.1e} < 1e-6 in {len(em.residuals) - 1} iterations":
            em.residuals[-1] < 1e-6 and len(em.residuals) - 1 <= 50,
        f"alpha 1e3 labelled {big.label!r} (want 'diverged')": big.label == "diverged",
        f"alpha 1e-3 labelled {small.label!r} (want 'stalled')": small.label == "stalled",
    }, seconds, 5)


def quadcopter_costs(noise, planner, mode):
    task = tasks.make_task("quadcopter", noise_level=noise)
    tracking, H = task.extras["tracking"], task.horizon
    scale = task.extras["planning_noise_scale"] if planner == "i2c" else 1.0
    cfg = MpcConfig(H, planner=planner, mode=mode, input_mean=task.input_mean,
                    input_cov=task.input_cov, planning_noise_scale=scale)
    runs = run_seeds(task.system, lambda t: tracking.window(t, H), cfg, task.extras["steps"],
                     range(50), task.x0)
    return np.array([r.total_cost for r in runs])


@pytest.mark.slow
def test_criterion_11_partially_observed_mpc(report):
    start = time.perf_counter()
    low_i2c = np.percentile(quadcopter_costs("low", "i2c", "fb"), [10, 90])
    low_ilqr = np.percentile(quadcopter_costs("low", "ilqr", "ff"), [10, 90])
    high_i2c = np.percentile(quadcopter_costs("high", "i2c", "fb"), [10, 90])
    high_ilqr = np.percentile(quadcopter_costs("high", "ilqr", "fb"), [10, 90])
    spread_i2c, spread_ilqr = np.ptp(high_i2c), np.ptp(high_ilqr)
    seconds = time.perf_counter() - start
    assert report(11, {
        f"low: i2c FB p90 {low_i2c[1]:.1f} < iLQR FF p90 {low_ilqr[1]:.1f}":
            low_i2c[1] < low_ilqr[1],
        f"high: i2c FB spread {spread_i2c:.1f} < iLQR FB spread {spread_ilqr:.1f}":
            spread_i2c < spread_ilqr,
    }, seconds, 1200)


INVARIANT_SUITES = [
    "test_gaussian.py",
    "test_solver.py::test_backward_smoothing_matches_dense_oracle",
    "test_solver.py::test_backward_smoothing_single_step_is_filter",
    "test_solver.py::test_backward_smoothing_uninformative_is_noop",
    "test_solver.py::test_expert_at_plan_is_feedback",
    "test_solver.py::test_expert_unit_distance_probability",
    "test_solver.py::test_expert_midpoint_at_half_probability",
    "test_solver.py::test_expert_probability_monotone_in_distance",
    "test_solver.py::test_expected_closed_loop_probability_matches_monte_carlo",
    "test_solver.py::test_expert_policy_uses_belief_plan",
    "test_solver.py::test_expert_law_limits",
    "test_estimation_mpc.py::test_ckf_predict_is_kalman_on_affine",
    "test_estimation_mpc.py::test_ckf_update_is_kalman_on_affine",
]


def test_criterion_12_invariant_suites(report):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *(str(TESTS / s) for s in INVARIANT_SUITES)],
                          cwd=TESTS.parent, capture_output=True, text=True)
    seconds = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    assert report(12, {f"invariant suites green ({summary})": proc.returncode == 0},
                  seconds, 30), proc.stdout
