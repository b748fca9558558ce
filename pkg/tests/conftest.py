"""Shared fixtures. The expensive artifacts (4-D reachability solve, seed
sweep benchmarks) are session-scoped so the acceptance tests and unit tests
share one computation."""

import time

import numpy as np
import pytest

from crowdnav.dynamics import HumanState, RobotState
from crowdnav.predictor import (
    AnalyticCrowdPredictor,
    InteractionHistory,
    PredictorConfig,
)
from crowdnav.reachability import ReachabilityParams, default_grid, solve_brt
from crowdnav.sim import random_scenario, run_benchmark


# Wall-clock seconds of the expensive session artifacts, recorded when each
# fixture is built; the acceptance tests gate on these budgets.
WALL_SECONDS = {}


@pytest.fixture(scope="session")
def default_vf():
    """Default 41^2 x 21^2 avoid tube; solved once per session."""
    t0 = time.perf_counter()
    vf = solve_brt(default_grid(), ReachabilityParams())
    WALL_SECONDS["default_brt"] = time.perf_counter() - t0
    return vf


@pytest.fixture(scope="session")
def coarse_vf():
    """Small grid for interpolation/IO tests."""
    return solve_brt(default_grid(pos_count=15, vel_count=7),
                     ReachabilityParams())


def make_history(robot=(0.0, 0.0, 0.0, 0.0), humans=((2.0, 0.0), (0.0, 2.0))):
    return InteractionHistory.initial(
        RobotState(*robot), [HumanState(*h) for h in humans])


def make_predictor(goals=((5.0, 0.0), (0.0, 5.0)), **cfg):
    return AnalyticCrowdPredictor(np.asarray(goals, dtype=float),
                                  PredictorConfig(**cfg))


def fd_gradient(fn, u, h=1e-6):
    """Central finite differences of a scalar fn of a (T, 2) control array."""
    flat = np.asarray(u, dtype=float).ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(up.reshape(-1, 2)) - fn(dn.reshape(-1, 2))) / (2.0 * h)
    return out


BENCH_SEEDS = list(range(10))
BENCH_STEPS = 40


@pytest.fixture(scope="session")
def bench_n6(default_vf):
    """All four planners, N=6, 10 shared seeds."""
    scenarios = [random_scenario(s, 6, episode_steps=BENCH_STEPS)
                 for s in BENCH_SEEDS]
    t0 = time.perf_counter()
    report = run_benchmark(scenarios, ["ours", "decoupled", "mcts", "rrt"],
                           default_vf)
    WALL_SECONDS["bench_n6"] = time.perf_counter() - t0
    return report


@pytest.fixture(scope="session")
def bench_ours_rrt(default_vf):
    """ours vs rrt at N in {2, 10}, same 10 seeds (N=6 lives in bench_n6)."""
    out = {}
    t0 = time.perf_counter()
    for n in (2, 10):
        scenarios = [random_scenario(s, n, episode_steps=BENCH_STEPS)
                     for s in BENCH_SEEDS]
        out[n] = run_benchmark(scenarios, ["ours", "rrt"], default_vf)
    WALL_SECONDS["bench_n2_n10"] = time.perf_counter() - t0
    return out
