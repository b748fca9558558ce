"""Receding-horizon trajectory optimization by direct shooting.

Controls are the only decision variables; states are generated by the exact
ZOH rollout so the dynamics constraint holds by construction. The objective
is (1/T) * sum_t lambda_g ||x_t - x_g||^2 + lambda_int * J_int
+ lambda_eta * eta^2, with the robot speed bound as a quadratic penalty and
per-step control bounds by radial projection. When the reachability value at
the closest human drops below epsilon, the slack-relaxed safe-control
constraint on the first control is enforced by an augmented-Lagrangian outer
loop around a projected-gradient inner solver with Armijo backtracking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    A_MAX_DEFAULT,
    DT_DEFAULT,
    V_H_MAX_DEFAULT,
    V_R_MAX_DEFAULT,
    RobotControl,
    RobotState,
    clamp_norm,
    relative_state,
    rollout_robot_array,
)
from .errors import SolverDivergedError
from .interaction import j_int, j_int_value
from .predictor import InteractionHistory
from .reachability import (
    EPSILON_DEFAULT,
    ValueFunction,
    multi_agent_value,
    safe_constraint_with_grad,
    value_at,
)

log = logging.getLogger(__name__)

ATTENTION_METHODS = ("all-within-radius", "closest-within-radius", "forward-reachable")
WARM_START_STRATEGIES = ("none", "no-interaction", "no-interaction-no-safety",
                         "cheap-predictor")


@dataclass(frozen=True)
class AttentionConfig:
    """Which humans enter the interaction cost.

    closest-within-radius is the default: the nearest pedestrian dominates
    the disturbance the robot can cause, and restricting the cost to it keeps
    the interaction term on the same scale as the goal term, so the planner
    crosses the crowd instead of orbiting it.
    """

    method: str = "closest-within-radius"
    d_att: float = 4.0

    def __post_init__(self):
        if self.method not in ATTENTION_METHODS:
            raise ValueError(f"unknown attention method {self.method!r}")
        if not self.d_att > 0:
            raise ValueError("d_att must be positive")


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 20
    max_inner: int = 200
    grad_tol: float = 1e-4
    constraint_tol: float = 1e-4


@dataclass(frozen=True)
class PlannerConfig:
    lambda_g: float = 1.0
    lambda_int: float = 1.0
    lambda_eta: float = 1000.0
    horizon_steps: int = 12
    dt: float = DT_DEFAULT
    epsilon: float = EPSILON_DEFAULT
    a_max: float = A_MAX_DEFAULT
    v_r_max: float = V_R_MAX_DEFAULT
    v_h_max: float = V_H_MAX_DEFAULT
    speed_penalty: float = 100.0
    # Required clearance (in tube-value meters) of the worst-case next state:
    # the safety constraint becomes g(u1) >= safety_margin. The continuous
    # tube guarantee erodes under the 0.4 s zero-order hold and grid
    # interpolation, so closed-loop runs should budget roughly a grid cell.
    safety_margin: float = 0.0
    warm_start: str = "no-interaction"
    attention: AttentionConfig | None = field(default_factory=AttentionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.warm_start not in WARM_START_STRATEGIES:
            raise ValueError(f"unknown warm start strategy {self.warm_start!r}")


@dataclass
class PlanStats:
    iterations: int = 0
    outer_iterations: int = 0
    cost_goal: float = 0.0
    cost_interaction: float = 0.0
    cost_slack: float = 0.0
    cost_speed: float = 0.0
    objective: float = 0.0
    safety_active: bool = False
    converged: bool = True
    jint_terms: int = 0
    speed_residual: float = 0.0
    tag: str = "ours"
    fallback: bool = False


@dataclass
class Plan:
    controls: np.ndarray   # (T, 2)
    states: np.ndarray     # (T+1, 4)
    eta: float
    stats: PlanStats


@dataclass
class Problem:
    robot_state: RobotState
    goal: np.ndarray               # 4-vector, velocity target zero
    history: InteractionHistory
    vf: ValueFunction | None
    predictor: object
    cfg: PlannerConfig
    attention: tuple
    safety_active: bool
    closest_human: int | None


def attention_filter(cfg: AttentionConfig | None, robot: RobotState, humans,
                     horizon_steps: int = 12, dt: float = DT_DEFAULT,
                     v_r_max: float = V_R_MAX_DEFAULT,
                     v_h_max: float = V_H_MAX_DEFAULT) -> tuple:
    """Indices of humans considered by the interaction cost."""
    if not humans:
        return ()
    dists = [math.hypot(h.px - robot.px, h.py - robot.py) for h in humans]
    if cfg is None:
        return tuple(range(len(humans)))
    if cfg.method == "all-within-radius":
        return tuple(k for k, d in enumerate(dists) if d <= cfg.d_att)
    if cfg.method == "closest-within-radius":
        within = [(d, k) for k, d in enumerate(dists) if d <= cfg.d_att]
        if not within:
            return ()
        return (min(within)[1],)
    # forward-reachable: outer bound of the robot's reachable disc inflated
    # by the humans' travel over the horizon.
    t_h = horizon_steps * dt
    radius = v_r_max * t_h + v_h_max * t_h
    return tuple(k for k, d in enumerate(dists) if d <= radius)


def build_problem(state: RobotState, goal, history: InteractionHistory,
                  vf: ValueFunction | None, cfg: PlannerConfig,
                  predictor) -> Problem:
    goal = np.asarray(goal, dtype=float).ravel()
    if goal.size == 2:
        goal = np.concatenate([goal, [0.0, 0.0]])
    humans = [hs[-1] for hs in history.human_states]
    attention = attention_filter(cfg.attention, state, humans,
                                 cfg.horizon_steps, cfg.dt, cfg.v_r_max,
                                 cfg.v_h_max)
    safety_active, closest = False, None
    if vf is not None and humans:
        val, closest = multi_agent_value(vf, state, humans)
        safety_active = val <= cfg.epsilon
    return Problem(state, goal, history, vf, predictor, cfg,
                   attention, safety_active, closest)


def _state_maps(T: int, dt: float):
    """Linear maps from stacked controls to positions/velocities.

    Ap[t, s] scales u_s in position t; Av[t, s] in velocity t (exact ZOH).
    """
    Ap = np.zeros((T + 1, T))
    Av = np.zeros((T + 1, T))
    for t in range(1, T + 1):
        for s in range(t):
            Ap[t, s] = dt * dt * (t - s - 0.5)
            Av[t, s] = dt
    return Ap, Av


class _Objective:
    """Objective evaluation with analytic gradients for one frozen problem."""

    def __init__(self, problem: Problem, lambda_int: float | None = None,
                 extra_penalty=None):
        self.problem = problem
        cfg = problem.cfg
        self.cfg = cfg
        self.T = cfg.horizon_steps
        self.lambda_int = cfg.lambda_int if lambda_int is None else lambda_int
        self.extra_penalty = extra_penalty
        self.Ap, self.Av = _state_maps(self.T, cfg.dt)
        self.x0 = problem.robot_state.as_array()
        self.use_interaction = (self.lambda_int > 0.0 and len(problem.attention) > 0)

    def rollout(self, u: np.ndarray) -> np.ndarray:
        return rollout_robot_array(self.x0, u, self.cfg.dt)

    def _goal_speed(self, u, want_grad):
        cfg, T = self.cfg, self.T
        states = self.rollout(u)
        dp = states[:, :2] - self.problem.goal[:2]
        dv = states[:, 2:] - self.problem.goal[2:]
        goal = cfg.lambda_g / T * (np.sum(dp * dp) + np.sum(dv * dv))

        speed = np.linalg.norm(states[:, 2:], axis=1)
        over = np.maximum(speed - cfg.v_r_max, 0.0)
        speed_cost = cfg.speed_penalty * np.sum(over * over)
        residual = float(np.max(over))

        grad = None
        if want_grad:
            grad = 2.0 * cfg.lambda_g / T * (self.Ap.T @ dp + self.Av.T @ dv)
            safe = np.maximum(speed, 1e-300)
            dspeed = (2.0 * cfg.speed_penalty * over / safe)[:, None] * states[:, 2:]
            grad += self.Av.T @ dspeed

        extra = 0.0
        if self.extra_penalty is not None:
            if want_grad:
                extra, gstates = self.extra_penalty(states, True)
                grad += self.Ap.T @ gstates[:, :2] + self.Av.T @ gstates[:, 2:]
            else:
                extra, _ = self.extra_penalty(states, False)
        return goal, speed_cost, extra, residual, grad

    def value(self, u: np.ndarray) -> float:
        goal, speed_cost, extra, _, _ = self._goal_speed(u, False)
        total = goal + speed_cost + extra
        if self.use_interaction:
            total += self.lambda_int * j_int_value(
                u, self.problem.history, self.problem.predictor,
                self.problem.attention)
        if not math.isfinite(total):
            raise SolverDivergedError("non-finite objective value")
        return total

    def value_and_grad(self, u: np.ndarray):
        goal, speed_cost, extra, residual, grad = self._goal_speed(u, True)
        interaction = 0.0
        if self.use_interaction:
            res = j_int(u, self.problem.history, self.problem.predictor,
                        self.problem.attention)
            interaction = res.value
            grad = grad + self.lambda_int * res.gradient.reshape(self.T, 2)
        total = goal + speed_cost + extra + self.lambda_int * interaction
        if not math.isfinite(total):
            raise SolverDivergedError("non-finite objective value")
        return total, grad, {
            "goal": goal, "speed": speed_cost, "extra": extra,
            "interaction": interaction, "speed_residual": residual,
        }

    def components(self, u: np.ndarray) -> dict:
        _, _, comp = self.value_and_grad(u)
        return comp


def objective_components(problem: Problem, u, extra_penalty=None) -> dict:
    """Objective term breakdown for a control sequence (no slack term)."""
    obj = _Objective(problem, extra_penalty=extra_penalty)
    u = np.asarray(u, dtype=float).reshape(problem.cfg.horizon_steps, 2)
    total, _, comp = obj.value_and_grad(u)
    comp["total"] = total
    return comp


def _projected_descent(value_fn, grad_fn, z0, project, max_iter, grad_tol,
                       precond=None):
    """Spectral projected gradient with nonmonotone Armijo backtracking.

    Barzilai-Borwein step lengths handle the ill-conditioned shooting
    landscape far better than a fixed-step projected gradient. The
    nonmonotone reference is the max over the last 10 accepted values, so
    every accepted value stays strictly below the starting objective.
    precond is an optional positive diagonal scaling (used to tame the stiff
    slack coordinate, whose curvature is ~2*lambda_eta).

    Besides the stationarity test, the loop stops once the objective has
    stalled: no relative improvement above 1e-4 for 15 consecutive
    iterations. The shooting landscape has long shallow valleys where the
    projected-gradient norm plateaus far above grad_tol while the objective
    barely moves; burning the full iteration budget there buys nothing.
    Returns (z, f, iters, converged).
    """
    z = project(np.asarray(z0, dtype=float))
    fz = value_fn(z)
    g = grad_fn(z)
    recent = [fz]
    alpha = 1.0
    iters = 0
    converged = False
    f_best = fz
    stall = 0
    for _ in range(max_iter):
        iters += 1
        step = g if precond is None else precond * g
        if np.linalg.norm(z - project(z - step)) <= grad_tol:
            converged = True
            break
        d = project(z - alpha * step) - z
        slope = float(np.vdot(g, d))
        if slope >= 0.0:
            # spectral step lost descent; fall back to the unit step
            d = project(z - step) - z
            slope = float(np.vdot(g, d))
            if slope >= 0.0:
                converged = np.linalg.norm(d) <= 10 * grad_tol
                break
        f_ref = max(recent)
        lam = 1.0
        accepted = False
        for _bt in range(40):
            z_new = z + lam * d
            f_new = value_fn(z_new)
            if f_new <= f_ref + 1e-4 * lam * slope:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        g_new = grad_fn(z_new)
        s = z_new - z
        y = g_new - g
        sy = float(np.vdot(s, y))
        alpha = min(max(float(np.vdot(s, s)) / sy, 1e-4), 1e4) if sy > 0 else 1.0
        z, fz, g = z_new, f_new, g_new
        recent.append(fz)
        if len(recent) > 10:
            recent.pop(0)
        if f_best - fz > 1e-4 * max(1.0, abs(f_best)):
            f_best = fz
            stall = 0
        else:
            f_best = min(f_best, fz)
            stall += 1
            if stall >= 15:
                break
    return z, fz, iters, converged


def _safety_g(problem: Problem, u0: np.ndarray, want_grad: bool):
    """Raw safe-control constraint value (eta excluded) at the first control.

    The safe set is the intersection of the per-human safe sets, so g is the
    minimum of the per-human constraint values over every human inside the
    activation sublevel set (ties break to the lowest index). The gradient is
    taken at the minimizing human.
    """
    humans = [hs[-1] for hs in problem.history.human_states]
    best = None
    for k, h in enumerate(humans):
        x_rel = relative_state(problem.robot_state, h)
        if value_at(problem.vf, x_rel) > problem.cfg.epsilon \
                and k != problem.closest_human:
            continue
        q, dg = safe_constraint_with_grad(problem.vf, x_rel, u0,
                                          problem.cfg.dt, 0.0,
                                          problem.cfg.epsilon)
        if best is None or q.constraint_value < best[0]:
            best = (q.constraint_value, dg)
    return (best[0], best[1]) if want_grad else (best[0], None)


def solve(problem: Problem, warm_start_controls=None, extra_penalty=None,
          lambda_int_override: float | None = None,
          enforce_safety: bool | None = None) -> Plan:
    """Solve the shooting problem; always returns the best plan found."""
    cfg = problem.cfg
    T = cfg.horizon_steps
    sol = cfg.solver
    obj = _Objective(problem, lambda_int=lambda_int_override,
                     extra_penalty=extra_penalty)

    if warm_start_controls is None:
        u_init = np.zeros((T, 2))
    else:
        u_init = np.asarray(warm_start_controls, dtype=float).reshape(T, 2)
    u_init = clamp_norm(u_init, cfg.a_max)

    active = problem.safety_active if enforce_safety is None else \
        (enforce_safety and problem.safety_active)
    active = active and problem.vf is not None and problem.closest_human is not None

    def min_eta(u):
        if not active:
            return 0.0
        g, _ = _safety_g(problem, u[0], False)
        return max(0.0, cfg.safety_margin - g)

    def full_objective(u):
        eta = min_eta(u)
        return obj.value(u) + cfg.lambda_eta * eta * eta, eta

    total_iters = 0
    outer_iters = 0

    if not active:
        def project(u):
            return clamp_norm(u, cfg.a_max)

        def vfun(u):
            return obj.value(u)

        def gfun(u):
            _, g, _ = obj.value_and_grad(u)
            return g

        u, _, total_iters, converged = _projected_descent(
            vfun, gfun, u_init, project, sol.max_inner, sol.grad_tol)
        outer_iters = 1
        eta = 0.0
        violation = 0.0
    else:
        # z = [controls.ravel(), eta]
        lam = 0.0
        mu = 100.0

        def project(z):
            u = clamp_norm(z[:-1].reshape(T, 2), cfg.a_max)
            return np.concatenate([u.ravel(), [max(z[-1], 0.0)]])

        def g_of(z, want_grad):
            u0 = z[:2]
            g, dg = _safety_g(problem, u0, want_grad)
            return g - cfg.safety_margin + z[-1], dg

        def vfun(z):
            u = z[:-1].reshape(T, 2)
            g, _ = g_of(z, False)
            pen = 0.5 * mu * max(0.0, lam / mu - g) ** 2 - lam**2 / (2.0 * mu)
            return obj.value(u) + cfg.lambda_eta * z[-1] ** 2 + pen

        def gfun(z):
            u = z[:-1].reshape(T, 2)
            _, gradu, _ = obj.value_and_grad(u)
            g, dg = g_of(z, True)
            out = np.concatenate([gradu.ravel(), [2.0 * cfg.lambda_eta * z[-1]]])
            mult = -max(0.0, lam - mu * g)
            if mult != 0.0:
                out[:2] += mult * dg
                out[-1] += mult
            return out

        z = np.concatenate([u_init.ravel(), [min_eta(u_init)]])
        # At a constrained optimum with binding slack, stationarity in eta
        # gives multiplier = 2*lambda_eta*eta. Seeding lam with that estimate
        # (from the initial point's minimal slack) saves the outer loop several
        # rounds of multiplier ramp-up.
        lam = 2.0 * cfg.lambda_eta * z[-1]
        converged = False
        violation = math.inf
        for outer in range(sol.max_outer):
            outer_iters += 1
            precond = np.ones(z.size)
            precond[-1] = 1.0 / (2.0 * cfg.lambda_eta + mu)
            z, _, it, inner_ok = _projected_descent(
                vfun, gfun, z, project, sol.max_inner, sol.grad_tol, precond)
            total_iters += it
            g, _ = g_of(z, False)
            prev_violation = violation
            violation = max(0.0, -g)
            if violation <= sol.constraint_tol:
                converged = inner_ok
                break
            lam = max(0.0, lam - mu * g)
            if violation > 0.5 * prev_violation:
                mu = min(mu * 5.0, 1e8)
        u = z[:-1].reshape(T, 2)
        eta = min_eta(u)

    # Keep the better of {initial point, solver result} so the returned plan
    # never regresses past its starting objective.
    f_solved, eta_solved = full_objective(u)
    f_init, eta_init = full_objective(u_init)
    if f_init < f_solved:
        u, eta = u_init, eta_init
        f_solved = f_init
    else:
        eta = eta_solved

    states = obj.rollout(u)
    _, _, comp = obj.value_and_grad(u)
    stats = PlanStats(
        iterations=total_iters,
        outer_iterations=outer_iters,
        cost_goal=comp["goal"],
        cost_interaction=comp["interaction"],
        cost_slack=cfg.lambda_eta * eta * eta,
        cost_speed=comp["speed"],
        objective=f_solved,
        safety_active=bool(active),
        converged=bool(converged),
        jint_terms=(len(problem.attention) * problem.predictor.cfg.z_modes
                    if obj.use_interaction else 0),
        speed_residual=comp["speed_residual"],
    )
    return Plan(u, states, eta, stats)


def warm_start(strategy: str, problem: Problem) -> np.ndarray:
    """Initial control guess per the configured strategy; zeros on failure."""
    T = problem.cfg.horizon_steps
    if strategy == "none":
        return np.zeros((T, 2))
    try:
        if strategy == "no-interaction":
            plan = solve(problem, lambda_int_override=0.0)
        elif strategy == "no-interaction-no-safety":
            plan = solve(problem, lambda_int_override=0.0, enforce_safety=False)
        elif strategy == "cheap-predictor":
            cheap = replace(problem, predictor=problem.predictor.cheap_variant())
            plan = solve(cheap)
        else:
            raise ValueError(f"unknown warm start strategy {strategy!r}")
        return plan.controls
    except SolverDivergedError:
        log.warning("warm start %r failed, falling back to zero controls", strategy)
        return np.zeros((T, 2))


def plan_step(state: RobotState, goal, history: InteractionHistory,
              vf: ValueFunction | None, cfg: PlannerConfig, predictor,
              warm_start_controls=None):
    """One receding-horizon iteration: build, warm start, solve, first control.

    warm_start_controls, when given, overrides the configured warm-start
    strategy; the receding-horizon loop passes the previous plan shifted by
    one step, which keeps successive solves in the same avoidance homotopy
    instead of flip-flopping between symmetric detours.
    """
    problem = build_problem(state, goal, history, vf, cfg, predictor)
    if warm_start_controls is None:
        ws = warm_start(cfg.warm_start, problem)
    else:
        ws = np.asarray(warm_start_controls, dtype=float)
    plan = solve(problem, ws)
    u0 = clamp_norm(plan.controls[0], cfg.a_max)
    if not np.all(np.isfinite(u0)):
        raise SolverDivergedError("non-finite first control")
    return RobotControl(float(u0[0]), float(u0[1])), plan
