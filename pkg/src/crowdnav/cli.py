"""Command-line entry point.

Subcommands: brt (precompute the reachability grid cache), run (one
episode), bench (seed-sweep cross product), check-grad (finite-difference
verification of the interaction-cost gradient), inspect (describe a grid,
trace, scenario, or report file).

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure. Logging goes to stderr; set CROWDNAV_LOG to error/info/debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .dynamics import HumanState, RobotState
from .errors import GridFormatError, InvalidInputError, SolverDivergedError
from .interaction import j_int, j_int_value
from .metrics import count_collisions, metric_mpe, metric_mre, metric_msd
from .predictor import AnalyticCrowdPredictor, InteractionHistory, PredictorConfig
from .reachability import (
    GridSpec,
    ReachabilityParams,
    load_grid,
    save_grid,
    solve_brt,
)
from .sim import (
    PLANNER_NAMES,
    load_report,
    load_scenario,
    load_trace,
    random_scenario,
    run_benchmark,
    run_episode,
    save_report,
    save_trace,
)

log = logging.getLogger("crowdnav")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with its own status code."""

    def error(self, message):
        raise _UsageError(message)


def _setup_logging():
    level = os.environ.get("CROWDNAV_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crowdnav",
                description="Crowd navigation planning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("brt", help="precompute the reachability grid cache")
    b.add_argument("--out", required=True, help="output HJVF file")
    b.add_argument("--tau", type=float, default=1.0, help="tube horizon, s")
    b.add_argument("--radius", type=float, default=0.3,
                   help="collision radius, m")
    b.add_argument("--pos-extent", type=float, default=5.0)
    b.add_argument("--pos-count", type=int, default=41)
    b.add_argument("--vel-extent", type=float, default=2.2)
    b.add_argument("--vel-count", type=int, default=21)
    b.add_argument("--v-h-max", type=float, default=2.5)
    b.add_argument("--a-max", type=float, default=2.0)
    b.add_argument("--cfl", type=float, default=0.5)

    r = sub.add_parser("run", help="run one episode and write a trace")
    r.add_argument("--scenario", help="scenario YAML file")
    r.add_argument("--planner", choices=PLANNER_NAMES,
                   help="override the scenario's planner")
    r.add_argument("--seed", type=int, help="override the scenario's seed")
    r.add_argument("--n-humans", type=int, default=2,
                   help="humans in the generated scenario when no --scenario")
    r.add_argument("--brt", help="HJVF grid cache (required unless --planner rrt)")
    r.add_argument("--trace", help="output trace file (JSON lines)")

    e = sub.add_parser("bench", help="seed-sweep benchmark cross product")
    e.add_argument("--agents", default="2,6,10",
                   help="comma-separated human counts")
    e.add_argument("--seeds", type=int, default=10,
                   help="number of seeds (0..n-1) per cell")
    e.add_argument("--planners", default="ours,decoupled,mcts,rrt",
                   help="comma-separated planner list")
    e.add_argument("--brt", help="HJVF grid cache")
    e.add_argument("--report", help="output report JSON file")
    e.add_argument("--episode-steps", type=int, default=25)
    e.add_argument("--workers", type=int, default=1,
                   help="parallel episode workers")

    c = sub.add_parser("check-grad",
                       help="finite-difference check of the interaction gradient")
    c.add_argument("--trials", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--horizon", type=int, default=6)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--corrupt", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control test hook

    i = sub.add_parser("inspect", help="describe a grid/trace/scenario/report file")
    i.add_argument("path")
    return p


# -- brt ---------------------------------------------------------------------

def cmd_brt(args) -> int:
    grid = GridSpec(
        mins=(-args.pos_extent, -args.pos_extent, -args.vel_extent, -args.vel_extent),
        maxs=(args.pos_extent, args.pos_extent, args.vel_extent, args.vel_extent),
        counts=(args.pos_count, args.pos_count, args.vel_count, args.vel_count),
    )
    params = ReachabilityParams(r=args.radius, v_h_max=args.v_h_max,
                                a_max=args.a_max, tau=args.tau, cfl=args.cfl)
    vf = solve_brt(grid, params)
    save_grid(vf, args.out)
    n_nodes = int(np.prod(grid.counts))
    print(f"nodes={n_nodes} steps={vf.n_steps} "
          f"min={float(np.min(vf.values)):.6f} max={float(np.max(vf.values)):.6f}")
    return 0


# -- run ---------------------------------------------------------------------

def _resolve_scenario(args):
    if args.scenario:
        scenario = load_scenario(args.scenario)
    else:
        scenario = random_scenario(args.seed if args.seed is not None else 0,
                                   args.n_humans)
    if args.planner:
        scenario = replace(scenario, planner=args.planner)
    if args.seed is not None and args.scenario:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def cmd_run(args) -> int:
    scenario = _resolve_scenario(args)
    vf = None
    if scenario.planner != "rrt":
        if not args.brt:
            print("error: --brt is required for planner "
                  f"{scenario.planner!r}", file=sys.stderr)
            return 2
        vf = load_grid(args.brt)
    trace = run_episode(scenario, vf)
    if args.trace:
        save_trace(trace, args.trace)
    try:
        mpe = f"{metric_mpe(trace):.6f}"
    except Exception:
        mpe = "n/a"
    print(f"planner={scenario.planner} seed={scenario.seed} "
          f"msd={metric_msd(trace):.6f} mre={metric_mre(trace):.6f} mpe={mpe} "
          f"collisions={count_collisions(trace)}")
    return 0


# -- bench -------------------------------------------------------------------

def _parse_int_list(text, what):
    try:
        vals = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise _UsageError(f"bad {what} list {text!r}") from exc
    if not vals:
        raise _UsageError(f"empty {what} list")
    return vals


def _bench_cell(payload):
    """Worker entry: one (scenario, planner) cell; must stay picklable."""
    scenario, planner, grid_path = payload
    from .metrics import count_collisions, metric_mpe, metric_mre, metric_msd
    vf = load_grid(grid_path) if grid_path and planner != "rrt" else None
    cell = {"planner": planner, "seed": scenario.seed,
            "n_humans": scenario.n_humans}
    try:
        trace = run_episode(replace(scenario, planner=planner), vf)
        cell.update(
            msd=metric_msd(trace),
            mre=metric_mre(trace),
            mpe=metric_mpe(trace),
            collisions=count_collisions(trace, scenario.reachability.r),
            mean_iterations=float(np.mean(
                [r.plan["iterations"] for r in trace.records
                 if "iterations" in r.plan] or [0.0])),
            mean_jint_terms=float(np.mean(
                [r.plan.get("jint_terms", 0) for r in trace.records
                 if not r.planner_failed] or [0.0])),
            failed=False,
        )
    except Exception as exc:
        cell.update(failed=True, error=str(exc))
    return cell


def cmd_bench(args) -> int:
    agents = _parse_int_list(args.agents, "agents")
    planners = [p.strip() for p in args.planners.split(",") if p.strip()]
    for p in planners:
        if p not in PLANNER_NAMES:
            raise _UsageError(f"unknown planner {p!r}")
    if args.seeds < 1:
        raise _UsageError("--seeds must be >= 1")
    needs_grid = any(p != "rrt" for p in planners)
    if needs_grid and not args.brt:
        print("error: --brt is required for the selected planners",
              file=sys.stderr)
        return 2
    seeds = list(range(args.seeds))
    scenarios = [random_scenario(seed, n, episode_steps=args.episode_steps)
                 for n in agents for seed in seeds]

    if args.workers > 1:
        payloads = [(s, p, args.brt) for s in scenarios for p in planners]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            cells = list(pool.map(_bench_cell, payloads))
        cells.sort(key=lambda c: (c["n_humans"], c["planner"], c["seed"]))
        report = _assemble_report(cells, planners, seeds)
    else:
        vf = load_grid(args.brt) if args.brt else None
        report = run_benchmark(scenarios, planners, vf)
        report["seeds"] = seeds

    if args.report:
        save_report(report, args.report)
    _print_means_table(report)
    return 0


def _assemble_report(cells, planners, seeds):
    means = {}
    for planner, n in sorted({(c["planner"], c["n_humans"]) for c in cells}):
        sub = [c for c in cells if c["planner"] == planner
               and c["n_humans"] == n and not c["failed"]]
        key = f"{planner}/n{n}"
        if not sub:
            means[key] = {"failed_cells": True}
            continue
        means[key] = {m: float(np.mean([c[m] for c in sub]))
                      for m in ("msd", "mre", "mpe", "collisions",
                                "mean_iterations", "mean_jint_terms")}
        means[key]["seeds"] = [c["seed"] for c in sub]
    return {"seeds": seeds, "planners": planners, "cells": cells,
            "means": means}


def _print_means_table(report):
    cols = ("msd", "mre", "mpe", "collisions")
    print(f"{'cell':<16}" + "".join(f"{c:>12}" for c in cols))
    for key in sorted(report["means"]):
        m = report["means"][key]
        if m.get("failed_cells"):
            print(f"{key:<16}{'(all cells failed)':>12}")
            continue
        print(f"{key:<16}" + "".join(f"{m[c]:>12.4f}" for c in cols))


# -- check-grad ---------------------------------------------------------------

def _random_check_problem(rng, horizon):
    n_humans = int(rng.integers(1, 4))
    starts = rng.uniform(-3.0, 3.0, (n_humans, 2))
    goals = rng.uniform(-4.0, 4.0, (n_humans, 2))
    robot = RobotState(*rng.uniform(-2.0, 2.0, 2), *rng.uniform(-1.0, 1.0, 2))
    history = InteractionHistory.initial(
        robot, [HumanState(*s) for s in starts])
    predictor = AnalyticCrowdPredictor(goals, PredictorConfig(
        z_modes=int(rng.integers(1, 4))))
    u = rng.uniform(-1.5, 1.5, (horizon, 2))
    attention = tuple(range(n_humans))
    return history, predictor, u, attention


def cmd_check_grad(args) -> int:
    if args.trials < 1:
        raise _UsageError("--trials must be >= 1")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    worst_case = None
    h = 1e-6
    for trial in range(args.trials):
        history, predictor, u, attention = _random_check_problem(
            rng, args.horizon)
        res = j_int(u, history, predictor, attention)
        analytic = res.gradient.copy()
        if args.corrupt:
            analytic[0] += 1.0
        fd = np.empty_like(analytic)
        flat = u.ravel().copy()
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (j_int_value(up.reshape(-1, 2), history, predictor, attention)
                     - j_int_value(dn.reshape(-1, 2), history, predictor,
                                   attention)) / (2.0 * h)
        denom = max(np.linalg.norm(fd), 1e-8)
        rel = float(np.linalg.norm(analytic - fd) / denom)
        if rel > worst:
            worst, worst_case = rel, trial
    status = "PASS" if worst <= args.tol else "FAIL"
    print(f"{status} max_rel_err={worst:.3e} worst_trial={worst_case} "
          f"trials={args.trials} tol={args.tol:g}")
    return 0 if worst <= args.tol else 3


# -- inspect ------------------------------------------------------------------

def cmd_inspect(args) -> int:
    path = args.path
    if path.endswith((".yaml", ".yml")):
        s = load_scenario(path)
        print(f"scenario seed={s.seed} planner={s.planner} "
              f"humans={s.n_humans} steps={s.episode_steps}")
        return 0
    if path.endswith(".json"):
        report = load_report(path)
        print(f"report planners={','.join(report['planners'])} "
              f"seeds={len(report['seeds'])} cells={len(report['cells'])}")
        return 0
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"HJVF":
        vf = load_grid(path)
        print(f"grid counts={vf.grid.counts} tau={vf.tau:g} "
              f"r={vf.params.r:g} min={float(np.min(vf.values)):.6f} "
              f"max={float(np.max(vf.values)):.6f}")
        return 0
    trace = load_trace(path)
    print(f"trace planner={trace.meta['planner']} seed={trace.meta['seed']} "
          f"steps={len(trace)} humans={trace.meta['n_humans']} "
          f"msd={metric_msd(trace):.6f}")
    return 0


_COMMANDS = {
    "brt": cmd_brt,
    "run": cmd_run,
    "bench": cmd_bench,
    "check-grad": cmd_check_grad,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError, json.JSONDecodeError,
            UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, GridFormatError, SolverDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
