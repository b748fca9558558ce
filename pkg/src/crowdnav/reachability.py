"""Backward-reachable-tube computation and online safety queries.

The robot-vs-one-human game is posed on a 4-D relative state
(prx, pry, vrx, vry): human-minus-robot position plus robot velocity, with
relative dynamics (u_H - v_R, u_R). The avoid tube is obtained by explicit
first-order Lax-Friedrichs integration of the variational inequality
V <- min(l, V + dtau * H), starting from the signed distance to the
collision cylinder. The inner game optimizations are analytic:
H = -grad_p V . v_R - v_H_max * ||grad_p V|| + a_max * ||grad_v V||.
Multi-human safety is the pairwise minimum over per-human queries.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    A_MAX_DEFAULT,
    V_H_MAX_DEFAULT,
    HumanControl,
    RelativeState,
    RobotControl,
    RobotState,
    relative_state,
)
from .errors import GridFormatError, InvalidInputError, SolverDivergedError

# Safety activation threshold in meters of tube value (the value function is
# in signed-distance units).
EPSILON_DEFAULT = 0.5
MAGIC = b"HJVF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Uniform 4-D grid over (prx, pry, vrx, vry)."""

    mins: tuple
    maxs: tuple
    counts: tuple

    def __post_init__(self):
        if len(self.mins) != 4 or len(self.maxs) != 4 or len(self.counts) != 4:
            raise InvalidInputError("grid must have exactly 4 dimensions")
        for lo, hi, n in zip(self.mins, self.maxs, self.counts):
            if not lo < hi:
                raise InvalidInputError("grid min must be below max")
            if n < 3:
                raise InvalidInputError("grid needs at least 3 nodes per dimension")

    @property
    def spacings(self) -> tuple:
        return tuple((hi - lo) / (n - 1)
                     for lo, hi, n in zip(self.mins, self.maxs, self.counts))

    def axis(self, d: int) -> np.ndarray:
        return np.linspace(self.mins[d], self.maxs[d], self.counts[d])


def default_grid(pos_extent: float = 5.0, pos_count: int = 41,
                 vel_extent: float = 2.2, vel_count: int = 21) -> GridSpec:
    return GridSpec(
        mins=(-pos_extent, -pos_extent, -vel_extent, -vel_extent),
        maxs=(pos_extent, pos_extent, vel_extent, vel_extent),
        counts=(pos_count, pos_count, vel_count, vel_count),
    )


@dataclass(frozen=True)
class ReachabilityParams:
    r: float = 0.3              # collision radius, m
    v_h_max: float = V_H_MAX_DEFAULT
    a_max: float = A_MAX_DEFAULT
    tau: float = 1.0            # tube horizon, s
    cfl: float = 0.5

    def __post_init__(self):
        if self.r <= 0:
            raise InvalidInputError("collision radius must be positive")
        if self.tau < 0:
            raise InvalidInputError("tau must be nonnegative")
        if not 0 < self.cfl <= 1:
            raise InvalidInputError("cfl must be in (0, 1]")


@dataclass
class ValueFunction:
    grid: GridSpec
    values: np.ndarray          # shape = grid.counts
    tau: float
    params: ReachabilityParams
    _gradients: list = field(default=None, repr=False)
    query_count: int = field(default=0, repr=False)
    n_steps: int = 0            # explicit integration steps taken

    def node_gradients(self) -> list:
        """Central-difference gradients per dimension, cached."""
        if self._gradients is None:
            self._gradients = list(np.gradient(self.values, *self.grid.spacings))
        return self._gradients


@dataclass
class SafeSetQuery:
    active: bool
    constraint_value: float
    worst_case_human: HumanControl


def target_level(x: RelativeState, r: float) -> float:
    """Signed distance to the collision cylinder; velocity dimensions free."""
    return math.hypot(x.prx, x.pry) - r


def _target_level_grid(grid: GridSpec, r: float) -> np.ndarray:
    px = grid.axis(0)[:, None, None, None]
    py = grid.axis(1)[None, :, None, None]
    l = np.sqrt(px**2 + py**2) - r
    return np.broadcast_to(l, grid.counts).copy()


def _upwind_diffs(V: np.ndarray, dx: float, axis: int):
    """Right/left one-sided differences; edges replicate the interior stencil."""
    d = np.diff(V, axis=axis) / dx
    Dp = np.concatenate([d, np.take(d, [-1], axis=axis)], axis=axis)
    Dm = np.concatenate([np.take(d, [0], axis=axis), d], axis=axis)
    return Dp, Dm


def solve_brt(grid: GridSpec, params: ReachabilityParams) -> ValueFunction:
    """Solve the avoid-tube variational inequality backward over params.tau."""
    l = _target_level_grid(grid, params.r)
    V = l.copy()
    if params.tau == 0.0:
        return ValueFunction(grid, V, 0.0, params)

    dxs = grid.spacings
    vrx = grid.axis(2)[None, None, :, None]
    vry = grid.axis(3)[None, None, None, :]
    vh, am = params.v_h_max, params.a_max

    # Global Lax-Friedrichs dissipation from analytic Hamiltonian bounds.
    alphas = (
        float(np.max(np.abs(grid.axis(2)))) + vh,
        float(np.max(np.abs(grid.axis(3)))) + vh,
        am,
        am,
    )
    # The step size depends only on the CFL bound (not on tau), and the
    # update freezes the value (min with the previous V, the discrete form of
    # the min(0, H) variational inequality). Together these make V pointwise
    # non-increasing in tau across separate solves: a longer-tau solve
    # replays the exact step prefix of a shorter one, and every step only
    # lowers values.
    dtau_cfl = params.cfl / sum(a / dx for a, dx in zip(alphas, dxs))
    n_full = int(math.floor(params.tau / dtau_cfl + 1e-12))
    remainder = params.tau - n_full * dtau_cfl
    steps = [dtau_cfl] * n_full + ([remainder] if remainder > 1e-12 else [])

    for step, dtau in enumerate(steps):
        diffs = [_upwind_diffs(V, dxs[d], d) for d in range(4)]
        q = [(Dp + Dm) / 2.0 for Dp, Dm in diffs]
        # With p_rel = p_H - p_R, the drift is dp/dt = u_H - v_R, so the
        # velocity advection enters with a minus sign.
        H = (-(q[0] * vrx + q[1] * vry)
             - vh * np.sqrt(q[0]**2 + q[1]**2)
             + am * np.sqrt(q[2]**2 + q[3]**2))
        # Dissipation enters with a plus sign because the update direction is
        # V <- V + dtau * H (diffusive for the grown-in-tau evolution).
        for d in range(4):
            Dp, Dm = diffs[d]
            H = H + alphas[d] * (Dp - Dm) / 2.0
        V = np.minimum(l, V + dtau * np.minimum(H, 0.0))
        if not np.all(np.isfinite(V)):
            raise SolverDivergedError(
                f"non-finite value function at step {step + 1}/{len(steps)}")
    return ValueFunction(grid, V, params.tau, params, n_steps=len(steps))


def solve_brt_1d(p_extent: float, count: int, r: float, tau: float,
                 u_r_max: float = 2.0, u_h_max: float = 2.5,
                 cfl: float = 0.5):
    """Degenerate 1-D pursuit tube (dp/dt = u_R - u_H), used for verification.

    The analytic tube boundary is |p| = r + max(0, u_h_max - u_r_max) * tau.
    Returns (axis, values).
    """
    xs = np.linspace(-p_extent, p_extent, count)
    dx = xs[1] - xs[0]
    l = np.abs(xs) - r
    V = l.copy()
    if tau == 0.0:
        return xs, V
    alpha = max(u_r_max, u_h_max)
    dtau_cfl = cfl * dx / alpha
    n_full = int(math.floor(tau / dtau_cfl + 1e-12))
    remainder = tau - n_full * dtau_cfl
    steps = [dtau_cfl] * n_full + ([remainder] if remainder > 1e-12 else [])
    for step, dtau in enumerate(steps):
        d = np.diff(V) / dx
        Dp = np.concatenate([d, d[-1:]])
        Dm = np.concatenate([d[:1], d])
        q = (Dp + Dm) / 2.0
        H = (u_r_max - u_h_max) * np.abs(q) + alpha * (Dp - Dm) / 2.0
        V = np.minimum(l, V + dtau * np.minimum(H, 0.0))
        if not np.all(np.isfinite(V)):
            raise SolverDivergedError(f"non-finite 1-D value at step {step + 1}")
    return xs, V


def _locate(grid: GridSpec, coords):
    """Clamped cell indices and interpolation fractions per dimension."""
    idx, frac, clamped = [], [], False
    for d in range(4):
        lo, hi, n = grid.mins[d], grid.maxs[d], grid.counts[d]
        x = coords[d]
        if x < lo:
            x, clamped = lo, True
        elif x > hi:
            x, clamped = hi, True
        t = (x - lo) / grid.spacings[d]
        i0 = min(int(math.floor(t)), n - 2)
        idx.append(i0)
        frac.append(t - i0)
    return idx, frac, clamped


def _interp(arr: np.ndarray, idx, frac) -> float:
    sub = arr[idx[0]:idx[0] + 2, idx[1]:idx[1] + 2,
              idx[2]:idx[2] + 2, idx[3]:idx[3] + 2]
    for f in frac:
        sub = sub[0] * (1.0 - f) + sub[1] * f
    return float(sub)


def value_at(vf: ValueFunction, x: RelativeState, return_clamped: bool = False):
    """Multilinear interpolation; out-of-grid queries clamp to the boundary."""
    vf.query_count += 1
    idx, frac, clamped = _locate(vf.grid, x.as_array())
    v = _interp(vf.values, idx, frac)
    if return_clamped:
        return v, clamped
    return v


def grad_at(vf: ValueFunction, x: RelativeState) -> np.ndarray:
    """Interpolated central-difference gradient, 4-vector."""
    idx, frac, _ = _locate(vf.grid, x.as_array())
    grads = vf.node_gradients()
    return np.array([_interp(g, idx, frac) for g in grads])


def multi_agent_value(vf: ValueFunction, robot: RobotState, humans):
    """Minimum pairwise value over humans; ties go to the lowest index."""
    best, best_idx = math.inf, None
    for k, h in enumerate(humans):
        v = value_at(vf, relative_state(robot, h))
        if v < best:
            best, best_idx = v, k
    return best, best_idx


def _next_relative(x: np.ndarray, u: np.ndarray, u_h: np.ndarray, dt: float):
    """One step of the relative dynamics (u_H - v_R, u_R) for p = p_H - p_R."""
    nxt = np.empty(4)
    nxt[:2] = x[:2] + (u_h - x[2:]) * dt
    nxt[2:] = x[2:] + u * dt
    return nxt


def _human_candidates(vf: ValueFunction, x: np.ndarray, u: np.ndarray,
                      dt: float, k: int = 16):
    """Adversarial human control candidates on the speed circle."""
    vh = vf.params.v_h_max
    cands = []
    nominal = _next_relative(x, u, np.zeros(2), dt)
    gp = grad_at(vf, RelativeState(*nominal))[:2]
    n = np.linalg.norm(gp)
    if n > 0:
        # u_H enters the position drift with a plus sign, so the value-
        # minimizing human heads down the position gradient.
        cands.append(-vh * gp / n)
    angles = 2.0 * np.pi * np.arange(k) / k
    for a in angles:
        cands.append(vh * np.array([math.cos(a), math.sin(a)]))
    # The zero control guards against interior minima; it goes last so that
    # a full-speed adversary is reported when the minimum ties.
    cands.append(np.zeros(2))
    return cands


def safe_control_constraint(vf: ValueFunction, x: RelativeState, u: RobotControl,
                            dt: float, eta: float,
                            epsilon: float = EPSILON_DEFAULT) -> SafeSetQuery:
    """Slack-relaxed safe-control constraint g(u) = min_uH V(next) + eta.

    Feasible iff g >= 0. The inner minimum is approximated by the analytic
    adversarial candidate (gradient direction at the nominal next state) plus
    16 equally spaced boundary candidates.
    """
    if eta < 0:
        raise InvalidInputError("eta must be nonnegative")
    xa = x.as_array()
    ua = u.as_array() if hasattr(u, "as_array") else np.asarray(u, dtype=float)
    active = value_at(vf, x) <= epsilon
    best, worst = math.inf, np.zeros(2)
    for u_h in _human_candidates(vf, xa, ua, dt):
        v = value_at(vf, RelativeState(*_next_relative(xa, ua, u_h, dt)))
        if v < best:
            best, worst = v, u_h
    return SafeSetQuery(active, best + eta, HumanControl(worst[0], worst[1]))


def safe_constraint_with_grad(vf: ValueFunction, x: RelativeState, u,
                              dt: float, eta: float,
                              epsilon: float = EPSILON_DEFAULT):
    """Constraint value plus d(g)/d(u) at the active adversarial candidate.

    The robot control enters only through the velocity part of the next
    relative state, so dg/du = dt * grad_v V(next*).
    """
    ua = u.as_array() if hasattr(u, "as_array") else np.asarray(u, dtype=float)
    q = safe_control_constraint(vf, x, RobotControl(ua[0], ua[1]), dt, eta, epsilon)
    xa = x.as_array()
    worst = q.worst_case_human.as_array()
    nxt = _next_relative(xa, ua, worst, dt)
    dg_du = dt * grad_at(vf, RelativeState(*nxt))[2:]
    return q, dg_du


def save_grid(vf: ValueFunction, path) -> None:
    """Write the little-endian HJVF cache; round trips are bit-exact."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for d in range(4):
            f.write(struct.pack("<ddI", vf.grid.mins[d], vf.grid.maxs[d],
                                vf.grid.counts[d]))
        f.write(struct.pack("<dddd", vf.tau, vf.params.r,
                            vf.params.v_h_max, vf.params.a_max))
        f.write(np.ascontiguousarray(vf.values, dtype="<f8").tobytes())


def load_grid(path) -> ValueFunction:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise GridFormatError(f"truncated file while reading {what}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise GridFormatError("bad magic bytes, expected HJVF")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise GridFormatError(f"unsupported format version {version}")
    mins, maxs, counts = [], [], []
    for d in range(4):
        lo, hi, n = struct.unpack("<ddI", take(20, f"dimension {d}"))
        mins.append(lo)
        maxs.append(hi)
        counts.append(int(n))
    tau, r, v_h_max, a_max = struct.unpack("<dddd", take(32, "parameters"))
    grid = GridSpec(tuple(mins), tuple(maxs), tuple(counts))
    n_nodes = int(np.prod(counts))
    payload = take(8 * n_nodes, "values")
    if off != len(data):
        raise GridFormatError("trailing bytes after values payload")
    values = np.frombuffer(payload, dtype="<f8").reshape(counts).copy()
    params = ReachabilityParams(r=r, v_h_max=v_h_max, a_max=a_max, tau=tau)
    return ValueFunction(grid, values, tau, params)
