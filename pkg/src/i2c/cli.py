"""Command-line benchmark harness.

Configuration comes from an optional INI file with ``[environment]``,
``[solver]``, ``[mpc]`` and ``[run]`` sections; command-line flags override
file values. Every command writes CSV files with a header row plus a
``summary.json``. Column orders are listed in ``FORMATS.md``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tasks
from .baselines import (cem_solve, classify_trace, gauss_newton_inference, ilqr_solve,
                        linear_dynamics_list, lqr_backward, quadratic_cost_from_features,
                        reference_inverse_problem, risk_sensitive_backward)
from .errors import I2cError, NonFiniteState
from .estimation_mpc import PLANNERS, MpcConfig, run_seeds
from .inference import make_propagator
from .solver import MODES, I2cConfig, annealing_weight, covariance_control_solve, solve
from .systems import linear_feedback, open_loop, rollout, rollout_batch

logger = logging.getLogger("i2c")

SECTIONS = {
    "environment": {"name", "horizon", "noise"},
    "solver": {"name", "iterations", "inference", "mode", "alpha0", "gamma", "input_mean",
               "input_cov", "particles", "elites"},
    "mpc": {"planner", "horizon", "warm_start_iterations", "step_iterations", "steps",
            "particles", "planning_noise_scale"},
    "run": {"seeds", "out", "deterministic"},
}
PARAM_PREFIX = "param."
SOLVERS = ("i2c", "ilqr", "lqr", "rs-lqr", "cem")


class ConfigError(ValueError):
    """Invalid configuration; reported with exit status 2."""


# configuration -------------------------------------------------------------------


def parse_seeds(spec: str) -> list:
    """``"0..99"`` (inclusive), ``"1,4,9"`` or a single integer."""
    seeds = []
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..")
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"invalid seeds specification {spec!r}") from None
    if not seeds:
        raise ConfigError("seeds must not be empty")
    return seeds


def parse_solver(spec: str):
    """Solver name and its risk parameter (only for ``rs-lqr:<sigma>``)."""
    name, _, arg = spec.partition(":")
    if name not in SOLVERS:
        raise ConfigError(f"unknown solver {spec!r}; choose from {list(SOLVERS)}")
    if name == "rs-lqr":
        try:
            return name, float(arg)
        except ValueError:
            raise ConfigError(f"rs-lqr needs a numeric risk parameter, got {spec!r}") from None
    if arg:
        raise ConfigError(f"solver {name!r} takes no parameter")
    return name, None


def read_config(path: Optional[str]) -> dict:
    """Sections of an INI file as dicts, rejecting unknown sections and keys."""
    out = {name: {} for name in SECTIONS}
    if path is None:
        return out
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section] and not (
                    section == "environment" and key.startswith(PARAM_PREFIX)):
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            out[section][key] = value
    return out


@dataclass
class RunConfig:
    env: str
    params: dict = field(default_factory=dict)
    solver: str = "i2c"
    sigma: Optional[float] = None
    horizon: Optional[int] = None
    seeds: list = field(default_factory=lambda: [0])
    out: Path = Path("out")
    inference: str = "cubature"
    mode: str = "fb"
    iterations: int = 200
    alpha0: Optional[float] = None
    gamma: float = 2.0
    input_mean: Optional[float] = None
    input_cov: Optional[float] = None
    particles: int = 50
    elites: Optional[int] = None
    deterministic: bool = False
    noise: str = "low"
    planner: str = "i2c"
    mpc_horizon: Optional[int] = None
    warm_start_iterations: int = 50
    step_iterations: int = 1
    steps: Optional[int] = None
    planning_noise_scale: Optional[float] = None


def _number(value, kind, key):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be {kind.__name__}, got {value!r}") from None


def _pick(flag, section, key, default=None, kind=str):
    if flag is not None:
        return flag
    if key in section:
        return _number(section[key], kind, key)
    return default


def build_run_config(args, default_env="pendulum") -> RunConfig:
    cfg = read_config(args.config)
    env_s, sol_s, mpc_s, run_s = cfg["environment"], cfg["solver"], cfg["mpc"], cfg["run"]
    env = _pick(args.env, env_s, "name", default_env)
    params = {}
    for key, value in env_s.items():
        if key.startswith(PARAM_PREFIX):
            params[key[len(PARAM_PREFIX):]] = json.loads(value)
    solver, sigma = parse_solver(_pick(args.solver, sol_s, "name", "i2c"))
    mode = _pick(args.mode, sol_s, "mode", "fb")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {list(MODES)}")
    inference = _pick(args.inference, sol_s, "inference", "cubature")
    try:
        make_propagator(inference)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    planner = _pick(args.planner, mpc_s, "planner", "i2c")
    if planner not in PLANNERS:
        raise ConfigError(f"unknown planner {planner!r}; choose from {list(PLANNERS)}")
    noise = _pick(args.noise, env_s, "noise", "low")
    if noise not in ("low", "high"):
        raise ConfigError(f"unknown noise level {noise!r}; choose from ['low', 'high']")
    particles = _pick(args.particles, sol_s, "particles", 50, int)
    particles = _pick(args.particles, mpc_s, "particles", particles, int)
    deterministic = args.deterministic or run_s.get("deterministic", "false").lower() in (
        "1", "true", "yes")
    return RunConfig(
        env=env, params=params, solver=solver, sigma=sigma,
        horizon=_pick(args.horizon, env_s, "horizon", None, int),
        seeds=parse_seeds(_pick(args.seeds, run_s, "seeds", "0")),
        out=Path(_pick(args.out, run_s, "out", "out")),
        inference=inference, mode=mode,
        iterations=_pick(args.iterations, sol_s, "iterations", 200, int),
        alpha0=_pick(None, sol_s, "alpha0", None, float),
        gamma=_pick(None, sol_s, "gamma", 2.0, float),
        input_mean=_pick(None, sol_s, "input_mean", None, float),
        input_cov=_pick(None, sol_s, "input_cov", None, float),
        particles=particles, elites=_pick(None, sol_s, "elites", None, int),
        deterministic=deterministic, noise=noise, planner=planner,
        mpc_horizon=_pick(None, mpc_s, "horizon", None, int),
        warm_start_iterations=_pick(None, mpc_s, "warm_start_iterations", 50, int),
        step_iterations=_pick(None, mpc_s, "step_iterations", 1, int),
        steps=_pick(args.steps, mpc_s, "steps", None, int),
        planning_noise_scale=_pick(None, mpc_s, "planning_noise_scale", None, float),
    )


def make_run_task(rc: RunConfig, **extra):
    if rc.env not in tasks.TASKS:
        raise ConfigError(f"unknown environment {rc.env!r}; choose from {sorted(tasks.TASKS)}")
    try:
        return tasks.make_task(rc.env, horizon=rc.horizon, **extra, **rc.params)
    except TypeError as exc:
        raise ConfigError(f"bad parameter for environment {rc.env!r}: {exc}") from None


def _input_prior(rc: RunConfig, task):
    du = task.system.dim_u
    mean = task.input_mean if rc.input_mean is None else np.full(du, rc.input_mean)
    cov = task.input_cov if rc.input_cov is None else rc.input_cov * np.eye(du)
    return mean, cov


# output --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def plan_header(dx, du):
    return (["t"] + [f"mu_x{i}" for i in range(dx)] + [f"mu_u{i}" for i in range(du)]
            + [f"var_x{i}" for i in range(dx)]
            + [f"K{i}_{j}" for i in range(du) for j in range(dx)])


def plan_rows(X, U, Sx, K):
    H = U.shape[0]
    for t in range(H):
        yield [t, *X[t], *U[t], *np.diag(Sx[t]), *K[t].reshape(-1)]


def cost_summary(costs):
    c = np.asarray(costs, dtype=float)
    p10, p50, p90 = (float(v) for v in np.percentile(c, [10, 50, 90]))
    return {"p10": p10, "p50": p50, "p90": p90, "mean": float(np.mean(c)), "n": int(c.size)}


# solve ---------------------------------------------------------------------------


@dataclass
class SolveOutcome:
    X: np.ndarray
    U: np.ndarray
    Sx: np.ndarray
    K: np.ndarray
    controller: object
    diag_rows: list
    seconds: list
    extra: dict


def _i2c_outcome(rc, task, mean, cov):
    config = I2cConfig(horizon=task.horizon, iterations=rc.iterations,
                       propagator=make_propagator(rc.inference, seed=rc.seeds[0]),
                       input_mean=mean, input_cov=cov, alpha0=rc.alpha0, gamma=rc.gamma,
                       mode=rc.mode)
    policy, belief, diag = solve(config, task.system, task.cost, task.x0)
    H = task.horizon
    U = np.array([policy.input_mean(t) for t in range(H)])
    rows = [[i, c, a, cl] for i, (c, a, cl) in
            enumerate(zip(diag.expected_cost, diag.alpha, diag.clamp_active))]
    return SolveOutcome(belief.xs_mean, U, belief.xs_cov, policy.K,
                        policy.controller(rc.mode), rows,
                        diag.iteration_seconds,
                        {"final_alpha": float(diag.final_alpha), "converged": diag.converged,
                         "error": diag.error})


def _ilqr_outcome(rc, task, mean, cov):
    H, dx = task.horizon, task.system.dim_x
    U0 = np.broadcast_to(mean, (H, task.system.dim_u))
    res = ilqr_solve(task.system, task.cost, task.x0.mean, H, max_iters=rc.iterations, U_init=U0)
    X, U, K = res.states, res.inputs, res.K
    if rc.mode == "ff":
        ctrl = open_loop(U)
    else:
        ctrl = lambda t, x, rng=None: U[t] + K[t] @ (np.asarray(x) - X[t])
    rows = [[i, c, "", ""] for i, c in enumerate(res.cost_trace)]
    return SolveOutcome(X, U, np.zeros((H + 1, dx, dx)), K, ctrl, rows, res.iteration_seconds,
                        {"converged": res.converged,
                         "line_search_failed": res.line_search_failed})


def _lqr_outcome(rc, task, mean, cov):
    sys, H = task.system, task.horizon
    dx, du = sys.dim_x, sys.dim_u
    nominal = (np.broadcast_to(task.x0.mean, (H + 1, dx)), np.broadcast_to(mean, (H, du)))
    start = time.perf_counter()
    dyn = linear_dynamics_list(sys, H, nominal)
    quad = quadratic_cost_from_features(task.cost, H, dx, du, nominal)
    if rc.solver == "rs-lqr":
        K, k, _ = risk_sensitive_backward(dyn, quad, rc.sigma)
    else:
        K, k, _ = lqr_backward(dyn, quad)
    seconds = [time.perf_counter() - start]
    ctrl = linear_feedback(K, k)
    plan = rollout(sys, ctrl, task.x0.mean, H, task.cost, deterministic=True)
    rows = [[0, plan.total_cost, "", ""]]
    return SolveOutcome(plan.states, plan.inputs, np.zeros((H + 1, dx, dx)), K, ctrl, rows,
                        seconds, {"sigma": rc.sigma})


def _cem_outcome(rc, task, mean, cov):
    H, dx, du = task.horizon, task.system.dim_x, task.system.dim_u
    res = cem_solve(task.system, task.cost, task.x0.mean, H, n=rc.particles, elites=rc.elites,
                    iters=rc.iterations, seed=rc.seeds[0], mean=np.broadcast_to(mean, (H, du)),
                    std=np.sqrt(np.diag(cov)))
    plan = rollout(task.system, open_loop(res.mean), task.x0.mean, H, task.cost,
                   deterministic=True)
    rows = [[i, c, "", ""] for i, c in enumerate(res.elite_mean_costs)]
    return SolveOutcome(plan.states, res.mean, np.zeros((H + 1, dx, dx)),
                        np.zeros((H, du, dx)), open_loop(res.mean), rows,
                        res.iteration_seconds, {"best_cost": res.best_cost})


SOLVE = {"i2c": _i2c_outcome, "ilqr": _ilqr_outcome, "lqr": _lqr_outcome,
         "rs-lqr": _lqr_outcome, "cem": _cem_outcome}


def cmd_solve(args) -> int:
    rc = build_run_config(args)
    task = make_run_task(rc)
    mean, cov = _input_prior(rc, task)
    start = time.perf_counter()
    outcome = SOLVE[rc.solver](rc, task, mean, cov)
    wall = time.perf_counter() - start
    dx, du = task.system.dim_x, task.system.dim_u
    write_csv(rc.out / "plan.csv", plan_header(dx, du),
              plan_rows(outcome.X, outcome.U, outcome.Sx, outcome.K))
    write_csv(rc.out / "diag.csv", ["iteration", "expected_cost", "alpha", "clamp"],
              outcome.diag_rows)
    rows, errors = [], []
    for seed in rc.seeds:
        tr = rollout(task.system, outcome.controller, task.x0, task.horizon, task.cost, seed=seed,
                     deterministic=rc.deterministic)
        rows.append([seed, tr.total_cost, float(task.goal_error(tr.states[-1]))])
        errors.append(rows[-1][2])
    write_csv(rc.out / "rollouts.csv", ["seed", "total_cost", "goal_error"], rows)
    seconds = outcome.seconds[2:] if len(outcome.seconds) > 2 else outcome.seconds
    summary = {
        "command": "solve", "env": rc.env, "solver": rc.solver, "mode": rc.mode,
        "inference": rc.inference, "horizon": task.horizon, "seeds": len(rc.seeds),
        "cost": cost_summary([r[1] for r in rows]),
        "goal_error_median": float(np.median(errors)),
        "iterations": len(outcome.diag_rows),
        "seconds_per_iteration": float(np.median(seconds)) if seconds else 0.0,
        "wall_clock": wall, **outcome.extra,
    }
    write_json(rc.out / "summary.json", summary)
    return 0


# mpc -----------------------------------------------------------------------------


def cmd_mpc(args) -> int:
    rc = build_run_config(args, default_env="quadcopter")
    extra = {"noise_level": rc.noise} if rc.env == "quadcopter" else {}
    task = make_run_task(rc, **extra)
    sys_ = task.system
    if sys_.measurement is None:
        raise ConfigError(f"environment {rc.env!r} has no measurement model")
    H = rc.mpc_horizon or task.horizon
    steps = rc.steps or task.extras.get("steps", task.horizon)
    mean, cov = _input_prior(rc, task)
    scale = rc.planning_noise_scale or task.extras.get("planning_noise_scale", 1.0)
    cfg = MpcConfig(H, warm_start_iterations=rc.warm_start_iterations,
                    step_iterations=rc.step_iterations, planner=rc.planner, mode=rc.mode,
                    particles=rc.particles, input_mean=mean, input_cov=cov,
                    propagator=make_propagator(rc.inference), planning_noise_scale=scale)
    tracking = task.extras.get("tracking")
    window = (lambda t: tracking.window(t, H)) if tracking else (lambda t: task.cost)
    start = time.perf_counter()
    runs = run_seeds(sys_, window, cfg, steps, rc.seeds, task.x0)
    wall = time.perf_counter() - start
    dx, du, dy = sys_.dim_x, sys_.dim_u, sys_.dim_y
    trace_header = (["seed", "t"] + [f"x{i}" for i in range(dx)]
                    + [f"x_hat{i}" for i in range(dx)] + [f"y{i}" for i in range(dy)]
                    + [f"u{i}" for i in range(du)] + ["cost"])

    def trace_rows():
        for run in runs:
            tr = run.trajectory
            n = tr.inputs.shape[0]
            for t in range(min(n, run.belief_mean.shape[0])):
                yield [tr.seed, t, *tr.states[t], *run.belief_mean[t], *tr.measurements[t],
                       *tr.inputs[t], tr.step_costs[t]]

    write_csv(rc.out / "filter_trace.csv", trace_header, trace_rows())
    costs = [r.total_cost for r in runs]
    write_csv(rc.out / "rollouts.csv", ["seed", "total_cost", "replan_failures"],
              [[r.trajectory.seed, c, len(r.errors)] for r, c in zip(runs, costs)])
    summary = {"command": "mpc", "env": rc.env, "planner": rc.planner, "mode": rc.mode,
               "noise": rc.noise, "horizon": H, "steps": steps, "seeds": len(rc.seeds),
               "cost": cost_summary(costs), "wall_clock": wall,
               "seconds_per_step": wall / max(1, len(rc.seeds) * steps)}
    write_json(rc.out / "summary.json", summary)
    return 0


# timing --------------------------------------------------------------------------


TIMED_BACKENDS = ("linearize", "cubature", "gh:4")


def bench_timing(iterations=22, warmup=2, env="double_cartpole"):
    """Median seconds per iteration of i2c (three backends) and iLQR.

    Rows are ``(solver, seconds, seconds / iLQR seconds)``.
    """
    task = tasks.make_task(env)
    mean = np.full(task.system.dim_u, 0.5)
    medians = {}
    for backend in TIMED_BACKENDS:
        config = I2cConfig(horizon=task.horizon, iterations=iterations,
                           propagator=make_propagator(backend), input_mean=mean,
                           input_cov=task.input_cov, tol=0.0)
        _, _, diag = solve(config, task.system, task.cost, task.x0)
        medians[f"i2c({backend})"] = float(np.median(diag.iteration_seconds[warmup:]))
    res = ilqr_solve(task.system, task.cost, task.x0.mean, task.horizon, max_iters=iterations,
                     U_init=np.broadcast_to(mean, (task.horizon, task.system.dim_u)), tol=0.0)
    medians["ilqr"] = float(np.median(res.iteration_seconds[warmup:]))
    ref = medians["ilqr"]
    return [(name, sec, sec / ref) for name, sec in medians.items()]


def cmd_bench_timing(args) -> int:
    rc = build_run_config(args, default_env="double_cartpole")
    if rc.env not in tasks.TASKS:
        raise ConfigError(f"unknown environment {rc.env!r}; choose from {sorted(tasks.TASKS)}")
    iterations = args.iterations or 22
    if iterations < 3:
        raise ConfigError("bench-timing needs at least 3 iterations")
    rows = bench_timing(iterations, env=rc.env)
    write_csv(rc.out / "timing.csv", ["solver", "seconds_per_iteration", "normalized"], rows)
    write_json(rc.out / "summary.json", {"command": "bench-timing", "env": rc.env,
                                         "iterations": iterations,
                                         "normalized": {r[0]: r[2] for r in rows}})
    return 0


# inverse demo --------------------------------------------------------------------


def cmd_demo_inverse(args) -> int:
    rc = build_run_config(args)
    if args.inverse_mode not in ("em", "iterated"):
        raise ConfigError(f"unknown inverse mode {args.inverse_mode!r}; choose em or iterated")
    f, y_star, prior = reference_inverse_problem()
    alpha = args.alpha
    if alpha is None and args.inverse_mode == "iterated":
        alpha = 1.0
    res = gauss_newton_inference(f, y_star, prior, mode=args.inverse_mode,
                                 iters=args.iterations or 50, alpha=alpha, theta=args.theta)
    # row 0 is the prior mean; its alpha is blank when EM calibrates it internally
    alphas = [alpha] + list(res.alphas)
    rows = [[i, r, "" if a is None else a] for i, (r, a) in
            enumerate(zip(res.residuals, alphas))]
    write_csv(rc.out / "inverse.csv", ["iteration", "residual", "alpha"], rows)
    write_json(rc.out / "summary.json", {
        "command": "demo-inverse", "mode": args.inverse_mode, "alpha": alpha,
        "theta": args.theta, "label": classify_trace(res.residuals),
        "final_residual": float(res.residuals[-1]), "iterations": len(res.residuals) - 1})
    return 0


# covariance control --------------------------------------------------------------


def cmd_covariance_control(args) -> int:
    rc = build_run_config(args, default_env="linear")
    if rc.env not in tasks.COVARIANCE_CONTROL:
        raise ConfigError(f"unknown covariance-control problem {rc.env!r}; choose from "
                          f"{sorted(tasks.COVARIANCE_CONTROL)}")
    prob = tasks.COVARIANCE_CONTROL[rc.env]()
    backend = "linearize" if prob.exact and args.inference is None else rc.inference
    iterations = args.iterations or prob.iterations
    config = I2cConfig(horizon=prob.horizon, iterations=iterations,
                       propagator=make_propagator(backend), input_mean=prob.input_mean,
                       input_cov=prob.input_cov)
    policy, belief, diag = covariance_control_solve(config, prob.system, prob.cost, prob.x0,
                                                    prob.target, prob.alpha)
    dx, du = prob.system.dim_x, prob.system.dim_u
    U = np.array([policy.input_mean(t) for t in range(prob.horizon)])
    write_csv(rc.out / "plan.csv", plan_header(dx, du),
              plan_rows(belief.xs_mean, U, belief.xs_cov, policy.K))
    write_csv(rc.out / "diag.csv", ["iteration", "kl", "beta"],
              [[i, kl, annealing_weight(i, iterations, config.anneal_fraction)]
               for i, kl in enumerate(diag.kl)])
    X0 = np.random.default_rng(rc.seeds[0]).multivariate_normal(prob.x0.mean, prob.x0.cov,
                                                                1000)
    tr = rollout_batch(prob.system, policy.controller("fb", stochastic=True), X0, prob.horizon,
                       seed=rc.seeds[0])
    XT = tr.states[:, -1]
    write_json(rc.out / "summary.json", {
        "command": "covariance-control", "problem": rc.env, "inference": backend,
        "final_kl": float(diag.kl[-1]), "target_mean": prob.target.mean.tolist(),
        "target_cov": prob.target.cov.tolist(), "sample_mean": XT.mean(axis=0).tolist(),
        "sample_cov": np.cov(XT.T).tolist()})
    return 0


# entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [environment]/[solver]/[mpc]/[run]")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seeds", help="seed list such as 0..99 or 1,2,3")
    common.add_argument("--inference", help="linearize, cubature, gh:<p> or mc:<n>")
    common.add_argument("--solver", help="i2c, ilqr, lqr, rs-lqr:<sigma> or cem")
    common.add_argument("--mode", help="execution mode: ff, fb or expert")
    common.add_argument("--env", help="environment or problem name")
    common.add_argument("--horizon", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--deterministic", action="store_true",
                        help="disable process noise in rollouts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="i2c", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", parents=[common], help="plan once and evaluate rollouts")
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("mpc", parents=[common], help="partially observed receding horizon")
    p.add_argument("--noise", help="measurement noise level: low or high")
    p.add_argument("--planner", help="i2c, ilqr or cem")
    p.add_argument("--particles", type=int)
    p.add_argument("--steps", type=int, help="closed-loop steps")
    p.set_defaults(func=cmd_mpc)
    p = sub.add_parser("bench-timing", parents=[common], help="per-iteration wall clock")
    p.set_defaults(func=cmd_bench_timing)
    p = sub.add_parser("demo-inverse", parents=[common], help="scalar inverse problem traces")
    p.add_argument("--inverse-mode", default="em", help="em or iterated")
    p.add_argument("--alpha", type=float)
    p.add_argument("--theta", type=float, default=0.0)
    p.set_defaults(func=cmd_demo_inverse)
    p = sub.add_parser("covariance-control", parents=[common],
                       help="steer the terminal distribution")
    p.set_defaults(func=cmd_covariance_control)
    for name in ("noise", "planner", "particles", "steps"):
        for action in sub.choices.values():
            if name not in {a.dest for a in action._actions}:
                action.set_defaults(**{name: None})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (I2cError, NonFiniteState, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
