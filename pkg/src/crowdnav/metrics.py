"""Episode metrics computed from traces.

All three headline metrics are deterministic functions of a trace:

* MSD — minimum separation distance between the robot and any human over the
  whole episode, with continuous-time interpolation between recorded states.
* MRE — mean relative (control) effort, average ||u|| / a_max over the steps.
* MPE — mean prediction error induced by the robot: average norm of the
  first-differenced gap between the robot-conditioned and robot-free
  mixture-mean velocities, converted to accelerations. First-differencing
  removes any constant velocity offset between the two predictions.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricUnavailableError
from .sim import Trace


def segment_min_distance(ra, rb, ha, hb) -> float:
    """Minimum distance between two points moving linearly over one step.

    Both endpoints are interpolated with the same parameter, so the gap is
    d(t) = a + t b for t in [0, 1] and the minimum is a 1-D quadratic clip.
    """
    a = np.asarray(ra, dtype=float) - np.asarray(ha, dtype=float)
    b = (np.asarray(rb, dtype=float) - np.asarray(hb, dtype=float)) - a
    bb = float(np.dot(b, b))
    t = 0.0 if bb == 0.0 else float(np.clip(-np.dot(a, b) / bb, 0.0, 1.0))
    return float(np.linalg.norm(a + t * b))


def _pairwise_distances(trace: Trace) -> np.ndarray:
    """(L, N) per-step minimum robot-human distances (interpolated)."""
    rp = trace.robot_positions()
    hp = trace.human_positions()
    L, N = len(trace), hp.shape[1]
    out = np.empty((L, N))
    for t in range(L):
        for k in range(N):
            out[t, k] = segment_min_distance(rp[t], rp[t + 1],
                                             hp[t, k], hp[t + 1, k])
    return out


def metric_msd(trace: Trace) -> float:
    """Minimum separation distance over the episode; inf with no humans."""
    if trace.human_positions().shape[1] == 0:
        return float("inf")
    return float(np.min(_pairwise_distances(trace)))


def count_collisions(trace: Trace, collision_radius: float | None = None) -> int:
    """Number of steps during which some human gets closer than the radius."""
    if collision_radius is None:
        collision_radius = float(trace.meta["collision_radius"])
    if trace.human_positions().shape[1] == 0:
        return 0
    d = _pairwise_distances(trace)
    return int(np.sum(np.any(d < collision_radius, axis=1)))


def metric_mre(trace: Trace) -> float:
    """Mean control effort normalized by the acceleration bound."""
    a_max = float(trace.meta["a_max"])
    u = np.array([r.robot_control for r in trace.records])
    return float(np.mean(np.linalg.norm(u, axis=1)) / a_max)


def metric_mpe(trace: Trace) -> float:
    """Mean robot-induced prediction perturbation, in acceleration units.

    Requires the per-step conditioned/unconditioned mean-velocity snapshots;
    raises MetricUnavailableError when they were not recorded (e.g. planner
    failures on every step, or a zero-human scenario).
    """
    dt = float(trace.meta["dt"])
    total, count = 0.0, 0
    for r in trace.records:
        if r.planner_failed:
            continue
        if not r.cond_mean_vels or not r.uncond_mean_vels:
            continue
        cond = np.asarray(r.cond_mean_vels)     # (N, T, 2)
        uncond = np.asarray(r.uncond_mean_vels)
        gap = cond - uncond
        if gap.shape[1] < 2:
            acc = np.zeros((gap.shape[0], 1, 2))
        else:
            acc = np.diff(gap, axis=1) / dt
        total += float(np.sum(np.linalg.norm(acc, axis=2)))
        count += gap.shape[0] * max(gap.shape[1] - 1, 1)
    if count == 0:
        raise MetricUnavailableError(
            "trace has no prediction snapshots; cannot compute MPE")
    return total / count
