"""Discrete-time agent dynamics.

The robot is a planar double integrator stepped with the exact zero-order-hold
map, humans are single integrators. Defaults: dt = 0.4 s, robot acceleration
bound 2 m/s^2, robot speed bound 2 m/s, human speed bound 2.5 m/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

A_MAX_DEFAULT = 2.0
V_R_MAX_DEFAULT = 2.0
V_H_MAX_DEFAULT = 2.5
DT_DEFAULT = 0.4


@dataclass(frozen=True)
class RobotState:
    px: float
    py: float
    vx: float
    vy: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.vx, self.vy])

    @staticmethod
    def from_array(a) -> "RobotState":
        a = np.asarray(a, dtype=float)
        return RobotState(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class RobotControl:
    ax: float
    ay: float

    def as_array(self) -> np.ndarray:
        return np.array([self.ax, self.ay])

    @staticmethod
    def from_array(a) -> "RobotControl":
        a = np.asarray(a, dtype=float)
        return RobotControl(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class HumanState:
    px: float
    py: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py])

    @staticmethod
    def from_array(a) -> "HumanState":
        a = np.asarray(a, dtype=float)
        return HumanState(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class HumanControl:
    vx: float
    vy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @staticmethod
    def from_array(a) -> "HumanControl":
        a = np.asarray(a, dtype=float)
        return HumanControl(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class RelativeState:
    """Human position minus robot position, plus the robot's own velocity."""

    prx: float
    pry: float
    vrx: float
    vry: float

    def as_array(self) -> np.ndarray:
        return np.array([self.prx, self.pry, self.vrx, self.vry])


@dataclass(frozen=True)
class StepParams:
    dt: float = DT_DEFAULT

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise InvalidInputError(f"dt must be positive, got {self.dt}")


def _check_finite(name, *values):
    for v in values:
        if not math.isfinite(v):
            raise InvalidInputError(f"non-finite value in {name}")


def step_robot(x: RobotState, u: RobotControl, p: StepParams = StepParams()) -> RobotState:
    """Advance the robot one step under constant acceleration (exact ZOH)."""
    _check_finite("robot state", x.px, x.py, x.vx, x.vy)
    _check_finite("robot control", u.ax, u.ay)
    dt = p.dt
    return RobotState(
        x.px + x.vx * dt + 0.5 * u.ax * dt * dt,
        x.py + x.vy * dt + 0.5 * u.ay * dt * dt,
        x.vx + u.ax * dt,
        x.vy + u.ay * dt,
    )


def step_human(x: HumanState, u: HumanControl, p: StepParams = StepParams()) -> HumanState:
    """Advance a human one step under a constant velocity command."""
    _check_finite("human state", x.px, x.py)
    _check_finite("human control", u.vx, u.vy)
    return HumanState(x.px + u.vx * p.dt, x.py + u.vy * p.dt)


def rollout_robot(x0: RobotState, u_seq, p: StepParams = StepParams()) -> list[RobotState]:
    """States visited when applying u_seq from x0; length len(u_seq) + 1."""
    states = [x0]
    for u in u_seq:
        states.append(step_robot(states[-1], u, p))
    return states


def relative_state(r: RobotState, h: HumanState) -> RelativeState:
    _check_finite("robot state", r.px, r.py, r.vx, r.vy)
    _check_finite("human state", h.px, h.py)
    return RelativeState(h.px - r.px, h.py - r.py, r.vx, r.vy)


def clamp_robot_control(u: RobotControl, a_max: float = A_MAX_DEFAULT) -> RobotControl:
    """Radially project u onto the disc ||u|| <= a_max."""
    n = math.hypot(u.ax, u.ay)
    if n <= a_max or n == 0.0:
        return u
    s = a_max / n
    return RobotControl(u.ax * s, u.ay * s)


# Array-level helpers used by the planner and simulator; same ZOH map as
# step_robot, vectorized over a whole control sequence.

def rollout_robot_array(x0: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Roll out a (T, 2) control array from a 4-vector state; returns (T+1, 4)."""
    u = np.asarray(u, dtype=float)
    T = u.shape[0]
    out = np.empty((T + 1, 4))
    out[0] = x0
    for t in range(T):
        p, v = out[t, :2], out[t, 2:]
        out[t + 1, :2] = p + v * dt + 0.5 * u[t] * dt * dt
        out[t + 1, 2:] = v + u[t] * dt
    return out


def clamp_norm(v: np.ndarray, bound: float) -> np.ndarray:
    """Radial projection of the last axis onto the ball of radius bound."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(n > bound, np.divide(bound, n, out=np.ones_like(n), where=n > 0), 1.0)
    return v * scale
