"""Comparison planners: decoupled predict-then-avoid, Monte Carlo tree
search over sampled futures, and RRT* treating humans as static obstacles.

All baselines emit Plan objects whose states are exact rollouts of their
controls, so downstream metrics treat every planner identically.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotControl, RobotState, clamp_norm, relative_state, rollout_robot_array
from .interaction import j_int_value
from .planner import (
    Plan,
    PlannerConfig,
    PlanStats,
    Problem,
    _Objective,
    build_problem,
    solve,
)
from .predictor import HumanControl, HumanState, InteractionHistory
from .reachability import safe_constraint_with_grad


@dataclass
class EllipseConstraint:
    center: np.ndarray     # (2,)
    shape: np.ndarray      # (2, 2) SPD; outside means (p-c)^T shape^-1 (p-c) >= 1
    timestep: int


@dataclass(frozen=True)
class MctsConfig:
    samples_per_node: int = 3
    branching: int = 3
    depth: int = 12
    seed: int = 0
    max_expansions: int = 48

    def __post_init__(self):
        if min(self.samples_per_node, self.branching, self.depth) < 1:
            raise ValueError("MCTS parameters must be positive")


@dataclass(frozen=True)
class RrtConfig:
    max_nodes: int = 2000
    step_size: float = 0.5
    goal_bias: float = 0.15
    rewire_radius: float = 1.5
    obstacle_radius: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal bias must be in [0, 1]")
        if min(self.max_nodes, self.step_size, self.rewire_radius) <= 0:
            raise ValueError("RRT parameters must be positive")


# ---------------------------------------------------------------------------
# Decoupled
# ---------------------------------------------------------------------------

def build_ellipses(pred, history: InteractionHistory, dt: float,
                   top_modes: int = 5, n_sigma: float = 1.0,
                   inflation: float = 0.3) -> list:
    """Per-timestep 1-sigma position ellipses of the highest-weight modes.

    Control covariance maps to position covariance by accumulating the
    per-step covariance scaled by dt^2 (single-integrator propagation of
    independent per-step noise). Each ellipse is additionally inflated by the
    robot's collision radius (shape = n_sigma^2 * cov + inflation^2 * I), the
    usual keep-out construction for predict-then-avoid planners.
    """
    out = []
    eye = np.eye(2)
    p0 = history.human_positions_now()
    for k, modes in enumerate(pred.per_human):
        ranked = sorted(range(len(modes)), key=lambda i: (-modes[i].weight, i))
        for i in ranked[:min(len(modes), top_modes)]:
            m = modes[i]
            centers = p0[k] + dt * np.cumsum(m.means, axis=0)
            covs = dt * dt * np.cumsum(m.covariances, axis=0)
            for t in range(pred.horizon):
                shape = n_sigma**2 * covs[t] + inflation**2 * eye
                out.append(EllipseConstraint(centers[t], shape, t + 1))
    return out


def _ellipse_penalty(ellipses, weight: float):
    """Quadratic penalty on states inside any ellipse, with exact gradient."""
    if not ellipses:
        def empty(states, want_grad):
            return 0.0, (np.zeros_like(states) if want_grad else None)
        return empty
    centers = np.array([e.center for e in ellipses])
    invs = np.array([np.linalg.inv(e.shape) for e in ellipses])
    tidx = np.array([e.timestep for e in ellipses])

    def penalty(states, want_grad):
        valid = tidx < states.shape[0]
        c, S, ts = centers[valid], invs[valid], tidx[valid]
        d = states[ts, :2] - c
        q = np.einsum("ei,eij,ej->e", d, S, d)
        inside = np.maximum(1.0 - q, 0.0)
        value = weight * float(np.sum(inside * inside))
        if not want_grad:
            return value, None
        grad = np.zeros_like(states)
        gp = -4.0 * weight * inside[:, None] * np.einsum("eij,ej->ei", S, d)
        np.add.at(grad, ts, np.concatenate([gp, np.zeros_like(gp)], axis=1))
        return value, grad

    return penalty


def _detour_inits(state: RobotState, goal_pos, T: int, a_max: float):
    """Straight and left/right lateral detour control initializations.

    The ellipse penalty field has broad local minima in front of swept
    prediction tubes; a gradient solver started straight at the goal parks
    there. Seeding extra solves that first accelerate sideways gives the
    planner genuine detour candidates, mimicking the global path search a
    decoupled avoid-the-predictions planner would normally run.
    """
    to_goal = goal_pos - np.array([state.px, state.py])
    n = np.linalg.norm(to_goal)
    d = to_goal / n if n > 1e-9 else np.array([1.0, 0.0])
    perp = np.array([-d[1], d[0]])
    bend = max(2, T // 3)
    inits = [np.zeros((T, 2))]
    for side in (1.0, -1.0):
        u = np.tile(a_max * d, (T, 1))
        u[:bend] = a_max * (0.5 * d + side * np.sqrt(0.75) * perp)
        inits.append(u)
    return inits


def plan_decoupled(state: RobotState, goal, history: InteractionHistory, vf,
                   cfg: PlannerConfig, predictor, previous_controls=None,
                   ellipse_weight: float = 200.0) -> Plan:
    """Predict once on the previous plan, freeze, avoid the mode ellipses.

    Solves from the straight initialization plus two lateral detour seeds and
    keeps the lowest-objective plan (first wins ties, so the result stays
    deterministic).
    """
    T = cfg.horizon_steps
    prev = (np.zeros((T, 2)) if previous_controls is None
            else np.asarray(previous_controls, dtype=float).reshape(T, 2))
    pred = predictor.predict(history, prev, T)
    ellipses = build_ellipses(pred, history, cfg.dt)
    problem = build_problem(state, goal, history, vf, cfg, predictor)
    penalty = _ellipse_penalty(ellipses, ellipse_weight)
    plan = None
    for init in _detour_inits(state, problem.goal[:2], T, cfg.a_max):
        cand = solve(problem, init, lambda_int_override=0.0,
                     extra_penalty=penalty)
        if plan is None or cand.stats.objective < plan.stats.objective:
            plan = cand
    plan.stats.tag = "decoupled"
    return plan


class DecoupledPlanner:
    """Stateful wrapper remembering the previously planned controls."""

    name = "decoupled"

    def __init__(self, cfg: PlannerConfig, predictor):
        self.cfg = cfg
        self.predictor = predictor
        self.previous_controls = None

    def plan_step(self, state, goal, history, vf):
        plan = plan_decoupled(state, goal, history, vf, self.cfg,
                              self.predictor, self.previous_controls)
        self.previous_controls = plan.controls
        u0 = clamp_norm(plan.controls[0], self.cfg.a_max)
        return RobotControl(float(u0[0]), float(u0[1])), plan


# ---------------------------------------------------------------------------
# MCTS
# ---------------------------------------------------------------------------

def _mcts_actions(p, v, goal_pos, a_max):
    """Three control candidates: coast, full thrust at goal, full brake."""
    to_goal = goal_pos - p
    n = np.linalg.norm(to_goal)
    thrust = a_max * to_goal / n if n > 1e-9 else np.zeros(2)
    speed = np.linalg.norm(v)
    brake = -a_max * v / speed if speed > 1e-9 else np.zeros(2)
    return [np.zeros(2), thrust, brake]


def _goal_completion(x, goal_pos, n, cfg):
    """Speed-limited goal-seeking default policy for rollout completion.

    Tracks the desired velocity v_r_max * unit(goal - p), so completions
    respect the speed bound regardless of the prefix they extend.
    """
    out = np.empty((n, 2))
    p, v = x[:2].copy(), x[2:].copy()
    for t in range(n):
        to_goal = goal_pos - p
        dist = np.linalg.norm(to_goal)
        v_des = cfg.v_r_max * to_goal / dist if dist > 1e-9 else np.zeros(2)
        u = clamp_norm((v_des - v) / cfg.dt, cfg.a_max)
        out[t] = u
        p = p + v * cfg.dt + 0.5 * u * cfg.dt**2
        v = v + u * cfg.dt
    return out


def _sample_human_rollout(pred, history: InteractionHistory, depth, dt, rng):
    """One sampled evolution of all humans over the first `depth` steps."""
    positions = history.human_positions_now()
    states = [positions.copy()]
    controls = np.empty((depth, pred.n_humans, 2))
    for k, modes in enumerate(pred.per_human):
        w = np.array([m.weight for m in modes])
        i = rng.choice(len(modes), p=w / w.sum())
        m = modes[i]
        for t in range(depth):
            cov = m.covariances[t]
            controls[t, k] = rng.multivariate_normal(m.means[t], cov)
    pos = positions.copy()
    for t in range(depth):
        pos = pos + dt * controls[t]
        states.append(pos.copy())
    return states, controls


def _advanced_history(history: InteractionHistory, robot_prefix, human_states,
                      human_controls, dt) -> InteractionHistory:
    """Copy of the history advanced along a robot prefix and sampled humans."""
    h = InteractionHistory(
        robot_states=list(history.robot_states),
        robot_controls=list(history.robot_controls),
        human_states=[list(s) for s in history.human_states],
        human_controls=[list(c) for c in history.human_controls],
        current_step=history.current_step,
    )
    rs = rollout_robot_array(h.robot_now.as_array(), robot_prefix, dt)
    for d in range(robot_prefix.shape[0]):
        h.append(
            RobotState.from_array(rs[d + 1]),
            RobotControl(float(robot_prefix[d, 0]), float(robot_prefix[d, 1])),
            [HumanState.from_array(human_states[d + 1][k])
             for k in range(len(h.human_states))],
            [HumanControl.from_array(human_controls[d, k])
             for k in range(len(h.human_states))],
        )
    return h


def plan_mcts(state: RobotState, goal, history: InteractionHistory, vf,
              mcts_cfg: MctsConfig, cfg: PlannerConfig, predictor) -> Plan:
    """Best-first search over a ternary action tree with sampled human futures.

    A node's value is the mean, over sampled human evolutions along its
    action prefix, of the full-horizon objective of the prefix completed by
    the goal-seeking default policy; the interaction term is evaluated
    against the sampled, advanced history.
    """
    rng = np.random.default_rng(mcts_cfg.seed)
    problem = build_problem(state, goal, history, vf, cfg, predictor)
    obj = _Objective(problem, lambda_int=0.0)
    T = cfg.horizon_steps
    depth_max = min(mcts_cfg.depth, T)
    goal_pos = problem.goal[:2]

    x_rel0 = None
    if vf is not None and problem.safety_active and problem.closest_human is not None:
        humans_now = [hs[-1] for hs in history.human_states]
        x_rel0 = relative_state(state, humans_now[problem.closest_human])

    def slack_cost(u1):
        """Slack term of the objective for a node's first control: the
        minimal feasible eta under the safety constraint, charged at
        lambda_eta like any other candidate plan."""
        if x_rel0 is None:
            return 0.0
        q, _ = safe_constraint_with_grad(vf, x_rel0, u1, cfg.dt, 0.0,
                                         cfg.epsilon)
        eta = max(0.0, cfg.safety_margin - q.constraint_value)
        return cfg.lambda_eta * eta * eta

    def evaluate(prefix):
        """Mean objective over sampled futures of the prefix completed by
        the goal-seeking default policy (zero completion would systematically
        understate every thrust branch, since a one-step push followed by
        coasting barely moves the goal term)."""
        d = prefix.shape[0]
        full = np.zeros((T, 2))
        full[:d] = prefix
        if d < T:
            rs = rollout_robot_array(state.as_array(), full[:d], cfg.dt)
            full[d:] = _goal_completion(rs[-1], goal_pos, T - d, cfg)
        base = obj.value(full) + slack_cost(full[0])
        if not problem.attention or cfg.lambda_int == 0.0:
            return base
        rem = full[d:] if d < T else np.zeros((1, 2))
        total = 0.0
        for _ in range(mcts_cfg.samples_per_node):
            if d > 0:
                pred = predictor.predict(history, full[:d], d)
                hs, hc = _sample_human_rollout(pred, history, d, cfg.dt, rng)
                h_adv = _advanced_history(history, full[:d], hs, hc, cfg.dt)
            else:
                h_adv = history
            total += cfg.lambda_int * j_int_value(rem, h_adv, predictor,
                                                  problem.attention)
        return base + total / mcts_cfg.samples_per_node

    counter = 0
    root = (evaluate(np.zeros((0, 2))), 0, np.zeros((0, 2)))
    frontier = [(root[0], counter, root[2])]
    expansions = 0
    best_leaf = None

    def children_of(prefix):
        rs = rollout_robot_array(state.as_array(), prefix, cfg.dt)
        p, v = rs[-1, :2], rs[-1, 2:]
        return _mcts_actions(p, v, goal_pos, cfg.a_max)[:mcts_cfg.branching]

    while frontier and expansions < mcts_cfg.max_expansions:
        cost, _, prefix = heapq.heappop(frontier)
        if prefix.shape[0] >= depth_max:
            best_leaf = (cost, prefix)
            break
        expansions += 1
        for a in children_of(prefix):
            child = np.vstack([prefix, a[None, :]])
            counter += 1
            heapq.heappush(frontier, (evaluate(child), counter, child))

    if best_leaf is None:
        # Budget exhausted: greedily deepen the best frontier node.
        cost, _, prefix = heapq.heappop(frontier) if frontier else (root[0], 0, root[2])
        while prefix.shape[0] < depth_max:
            expansions += 1
            scored = []
            for a in children_of(prefix):
                child = np.vstack([prefix, a[None, :]])
                scored.append((evaluate(child), len(scored), child))
            cost, _, prefix = min(scored)
        best_leaf = (cost, prefix)

    controls = np.zeros((T, 2))
    d = best_leaf[1].shape[0]
    controls[:d] = best_leaf[1]
    if d < T:
        rs = rollout_robot_array(state.as_array(), controls[:d], cfg.dt)
        controls[d:] = _goal_completion(rs[-1], goal_pos, T - d, cfg)
    controls = clamp_norm(controls, cfg.a_max)
    states = rollout_robot_array(state.as_array(), controls, cfg.dt)

    eta = 0.0
    if vf is not None and problem.closest_human is not None and problem.safety_active:
        humans = [hs[-1] for hs in history.human_states]
        x_rel = relative_state(state, humans[problem.closest_human])
        q, _ = safe_constraint_with_grad(vf, x_rel, controls[0], cfg.dt, 0.0,
                                        cfg.epsilon)
        eta = max(0.0, cfg.safety_margin - q.constraint_value)

    stats = PlanStats(
        iterations=expansions,
        outer_iterations=1,
        objective=float(best_leaf[0]),
        safety_active=problem.safety_active,
        converged=True,
        tag="mcts",
    )
    return Plan(controls, states, eta, stats)


class MctsPlanner:
    name = "mcts"

    def __init__(self, cfg: PlannerConfig, predictor, mcts_cfg: MctsConfig | None = None):
        self.cfg = cfg
        self.predictor = predictor
        self.mcts_cfg = mcts_cfg or MctsConfig(depth=cfg.horizon_steps)
        self._step = 0

    def plan_step(self, state, goal, history, vf):
        # Vary the seed per step deterministically so samples differ across
        # the episode while the whole run stays reproducible.
        cfg_step = MctsConfig(
            samples_per_node=self.mcts_cfg.samples_per_node,
            branching=self.mcts_cfg.branching,
            depth=self.mcts_cfg.depth,
            seed=self.mcts_cfg.seed + 1000003 * self._step,
            max_expansions=self.mcts_cfg.max_expansions,
        )
        self._step += 1
        plan = plan_mcts(state, goal, history, vf, cfg_step, self.cfg,
                         self.predictor)
        u0 = clamp_norm(plan.controls[0], self.cfg.a_max)
        return RobotControl(float(u0[0]), float(u0[1])), plan


# ---------------------------------------------------------------------------
# RRT*
# ---------------------------------------------------------------------------

def _segment_clear(a, b, obstacles, radius):
    if obstacles.size == 0:
        return True
    ab = b - a
    denom = float(np.dot(ab, ab))
    ao = obstacles - a
    if denom == 0.0:
        d2 = np.sum(ao * ao, axis=1)
    else:
        t = np.clip(ao @ ab / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        diff = obstacles - closest
        d2 = np.sum(diff * diff, axis=1)
    return bool(np.all(d2 >= radius * radius))


def rrt_star_path(start, goal, obstacles, rrt_cfg: RrtConfig):
    """Plain 2-D RRT*; returns (path vertices list, reached flag)."""
    rng = np.random.default_rng(rrt_cfg.seed)
    obstacles = np.asarray(obstacles, dtype=float).reshape(-1, 2)
    pts = np.vstack([[start], [goal], obstacles]) if obstacles.size else \
        np.vstack([[start], [goal]])
    lo = pts.min(axis=0) - 2.0
    hi = pts.max(axis=0) + 2.0

    nodes = np.empty((rrt_cfg.max_nodes + 1, 2))
    nodes[0] = np.asarray(start, dtype=float)
    n_nodes = 1
    parents = [-1]
    costs = [0.0]
    goal = np.asarray(goal, dtype=float)
    best_goal_node, best_goal_cost = None, math.inf

    for _ in range(rrt_cfg.max_nodes):
        if rng.random() < rrt_cfg.goal_bias:
            sample = goal.copy()
        else:
            sample = lo + rng.random(2) * (hi - lo)
        arr = nodes[:n_nodes]
        d = np.linalg.norm(arr - sample, axis=1)
        nearest = int(np.argmin(d))
        direction = sample - nodes[nearest]
        dist = np.linalg.norm(direction)
        if dist < 1e-9:
            continue
        new = nodes[nearest] + direction * min(1.0, rrt_cfg.step_size / dist)
        if not _segment_clear(nodes[nearest], new, obstacles,
                              rrt_cfg.obstacle_radius):
            continue
        # Choose the cheapest valid parent within the rewire radius.
        dnew = np.linalg.norm(arr - new, axis=1)
        near = np.nonzero(dnew <= rrt_cfg.rewire_radius)[0]
        parent, cost = nearest, costs[nearest] + float(dnew[nearest])
        for j in near:
            c = costs[j] + float(dnew[j])
            if c < cost and _segment_clear(nodes[j], new, obstacles,
                                           rrt_cfg.obstacle_radius):
                parent, cost = int(j), c
        idx = n_nodes
        nodes[idx] = new
        n_nodes += 1
        parents.append(parent)
        costs.append(cost)
        # Rewire neighbors through the new node.
        for j in near:
            c = cost + float(dnew[j])
            if c < costs[j] and _segment_clear(new, nodes[j], obstacles,
                                               rrt_cfg.obstacle_radius):
                parents[j] = idx
                costs[j] = c
        gd = float(np.linalg.norm(new - goal))
        if gd <= rrt_cfg.step_size and _segment_clear(new, goal, obstacles,
                                                      rrt_cfg.obstacle_radius):
            if cost + gd < best_goal_cost:
                best_goal_cost = cost + gd
                best_goal_node = idx

    if best_goal_node is None:
        return [np.asarray(start, dtype=float), goal], False
    path = [goal]
    i = best_goal_node
    while i != -1:
        path.append(nodes[i])
        i = parents[i]
    path.reverse()
    return path, True


def _track_path(state: RobotState, path, cfg: PlannerConfig):
    """Walk the polyline at the speed cap and invert the ZOH dynamics."""
    T, dt = cfg.horizon_steps, cfg.dt
    verts = np.array(path)
    seg = np.diff(verts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(np.sum(seg_len))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    def point_at(s):
        s = min(s, total)
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(i, len(seg) - 1) if len(seg) else 0
        if len(seg) == 0 or seg_len[i] == 0:
            return verts[min(i, len(verts) - 1)]
        f = (s - cum[i]) / seg_len[i]
        return verts[i] + f * seg[i]

    controls = np.empty((T, 2))
    x = state.as_array()
    for t in range(T):
        target = point_at((t + 1) * cfg.v_r_max * dt)
        u = 2.0 * (target - x[:2] - x[2:] * dt) / (dt * dt)
        u = clamp_norm(u, cfg.a_max)
        controls[t] = u
        x = rollout_robot_array(x, u[None, :], dt)[1]
    return controls


def plan_rrtstar(state: RobotState, goal, humans, rrt_cfg: RrtConfig,
                 cfg: PlannerConfig | None = None) -> Plan:
    """RRT* against humans as static discs, tracked by inverse dynamics."""
    cfg = cfg or PlannerConfig()
    goal = np.asarray(goal, dtype=float).ravel()[:2]
    obstacles = np.array([[h.px, h.py] for h in humans]) if humans else \
        np.zeros((0, 2))
    path, reached = rrt_star_path(state.position, goal, obstacles, rrt_cfg)
    controls = _track_path(state, path, cfg)
    states = rollout_robot_array(state.as_array(), controls, cfg.dt)
    stats = PlanStats(
        iterations=len(path),
        outer_iterations=1,
        objective=float(sum(np.linalg.norm(np.diff(np.array(path), axis=0), axis=1))),
        converged=reached,
        tag="rrt",
        fallback=not reached,
    )
    return Plan(controls, states, 0.0, stats)


class RrtStarPlanner:
    name = "rrt"

    def __init__(self, cfg: PlannerConfig, rrt_cfg: RrtConfig | None = None):
        self.cfg = cfg
        self.rrt_cfg = rrt_cfg or RrtConfig(obstacle_radius=0.3)

    def plan_step(self, state, goal, history, vf):
        humans = [hs[-1] for hs in history.human_states]
        plan = plan_rrtstar(state, goal, humans, self.rrt_cfg, self.cfg)
        u0 = clamp_norm(plan.controls[0], self.cfg.a_max)
        return RobotControl(float(u0[0]), float(u0[1])), plan
