"""Interaction-aware multimodal human motion prediction.

The reference predictor is an analytic goal-attraction / social-repulsion
model producing, for every human, a mixture of Z Gaussian modes over future
velocity commands. Each mode corresponds to one goal hypothesis: mode 1 uses
the human's true goal, the remaining modes perturb it on a regular angular
pattern. Conditioning on the robot's future controls adds a smooth repulsion
term from the robot's rolled-out positions, which makes the predicted means
(and hence any mixture log-density) differentiable in those controls. All
gradients here are exact analytic derivatives computed by forward
accumulation through the mean rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    DT_DEFAULT,
    V_H_MAX_DEFAULT,
    HumanControl,
    HumanState,
    RobotControl,
    RobotState,
)
from .errors import InvalidInputError

# Distances in repulsion/attraction terms are smoothed as sqrt(d^2 + DELTA^2)
# so the model is globally C^1 even at coincident positions.
DELTA_SMOOTH = 1e-3

# Goal attraction tapers as tanh(d / ARRIVAL_RADIUS) so agents settle at
# their goals instead of oscillating around them at v_pref (a unit-vector
# pull flips sign every step once the goal is overshot, which poisons any
# likelihood comparison between two slightly out-of-phase rollouts). tanh
# saturates to 1.0 exactly in double precision beyond ~19 radii, so the
# far-field pull is still exactly v_pref toward the goal.
ARRIVAL_RADIUS = 0.5

# Fraction of v_max below which the speed squash is the exact identity.
SQUASH_KNEE = 0.8


@dataclass
class PredictorConfig:
    """Parameters of the analytic reference predictor."""

    z_modes: int = 3
    sigma: float = 0.5              # per-step control std dev, m/s
    v_pref: float = 1.3             # preferred human speed, m/s
    repulsion_strength: float = 1.5     # A, m/s
    repulsion_range: float = 0.5        # B, m
    robot_repulsion_strength: float = 2.0   # A_R, m/s
    robot_repulsion_range: float = 1.0      # B_R, m
    goal_perturbation_radius: float = 1.0   # m

    def __post_init__(self):
        if self.z_modes < 1:
            raise InvalidInputError("z_modes must be >= 1")
        if self.sigma <= 0:
            raise InvalidInputError("sigma must be positive")
        if self.repulsion_range <= 0 or self.robot_repulsion_range <= 0:
            raise InvalidInputError("repulsion ranges must be positive")


@dataclass
class InteractionHistory:
    """Time-aligned past states/controls of the robot and all humans."""

    robot_states: list
    robot_controls: list
    human_states: list   # per human: list of HumanState
    human_controls: list  # per human: list of HumanControl
    current_step: int = 0

    def __post_init__(self):
        if len(self.robot_states) < 1:
            raise InvalidInputError("history needs at least one robot state")
        for hs in self.human_states:
            if len(hs) < 1:
                raise InvalidInputError("history needs at least one state per human")

    @staticmethod
    def initial(robot_state: RobotState, human_states) -> "InteractionHistory":
        return InteractionHistory(
            robot_states=[robot_state],
            robot_controls=[],
            human_states=[[h] for h in human_states],
            human_controls=[[] for _ in human_states],
            current_step=0,
        )

    @property
    def n_humans(self) -> int:
        return len(self.human_states)

    @property
    def robot_now(self) -> RobotState:
        return self.robot_states[-1]

    def human_positions_now(self) -> np.ndarray:
        return np.array([[hs[-1].px, hs[-1].py] for hs in self.human_states],
                        dtype=float).reshape(-1, 2)

    def append(self, robot_state, robot_control, human_states, human_controls):
        self.robot_states.append(robot_state)
        self.robot_controls.append(robot_control)
        for k, (s, c) in enumerate(zip(human_states, human_controls)):
            self.human_states[k].append(s)
            self.human_controls[k].append(c)
        self.current_step += 1


@dataclass
class GaussianMode:
    weight: float
    means: np.ndarray        # (T, 2)
    covariances: np.ndarray  # (T, 2, 2)


@dataclass
class MultimodalPrediction:
    per_human: list          # per human: list of GaussianMode, length Z
    horizon: int
    conditioned: bool

    @property
    def n_humans(self) -> int:
        return len(self.per_human)

    @property
    def z_modes(self) -> int:
        return len(self.per_human[0]) if self.per_human else 0


def _smooth_dist(x):
    """sqrt(||x||^2 + delta^2) along the last axis, keepdims."""
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + DELTA_SMOOTH**2)


def _outer(x):
    return np.einsum("...i,...j->...ij", x, x)


def _goal_pull(goals, p, v_pref, want_jac=False):
    """Arrival-tapered goal attraction v_pref*tanh(d/r)*unit(g-p).

    When want_jac, also returns the exact Jacobian with respect to p.
    """
    x = goals - p
    d = _smooth_dist(x)
    f = np.tanh(d / ARRIVAL_RADIUS)
    pull = v_pref * f * x / d
    if not want_jac:
        return pull, None
    eye = np.eye(2)
    dd = d[..., None]
    ff = f[..., None]
    coef = (1.0 - ff**2) / (ARRIVAL_RADIUS * dd**2) - ff / dd**3
    jac = -v_pref * ((ff / dd) * eye + coef * _outer(x))
    return pull, jac


def _squash(v, v_max, want_jac=False):
    """Smooth radial speed limit.

    Identity for speeds below SQUASH_KNEE * v_max; beyond the knee the radius
    saturates as c + (v_max - c) * tanh((n - c) / (v_max - c)), which is C^1
    at the knee and stays strictly below v_max.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    c = SQUASH_KNEE * v_max
    span = v_max - c
    arg = np.maximum(n - c, 0.0) / span
    over = n > c
    r = np.where(over, c + span * np.tanh(arg), n)
    safe_n = np.maximum(n, 1e-300)
    scale = np.where(over, r / safe_n, 1.0)
    s = v * scale
    if not want_jac:
        return s, None
    rp = np.where(over, 1.0 - np.tanh(arg) ** 2, 1.0)
    coef = np.where(over, (rp - scale) / safe_n**2, 0.0)
    eye = np.eye(2)
    jac = scale[..., None] * eye + coef[..., None] * _outer(v)
    return s, jac


def _radial_term(x, strength, rng, want_jac=False):
    """strength * exp(-d/rng) * x/d with smoothed d; optionally d(term)/dx."""
    d = _smooth_dist(x)
    c = strength * np.exp(-d / rng)
    term = c * x / d
    if not want_jac:
        return term, None
    eye = np.eye(2)
    dd = d[..., None]
    jac = c[..., None] * (eye / dd - _outer(x) * (1.0 / dd**3 + 1.0 / (rng * dd**2)))
    return term, jac


def robot_position_jacobians(horizon: int, dt: float) -> np.ndarray:
    """d(robot position at interval start t)/d(flattened controls), (T, 2, 2T).

    Under exact ZOH, control u_s moves the position at step t > s by
    dt^2 * (t - s - 1/2).
    """
    G = np.zeros((horizon, 2, 2 * horizon))
    for t in range(horizon):
        for s in range(t):
            coef = dt * dt * (t - s - 0.5)
            G[t, 0, 2 * s] = coef
            G[t, 1, 2 * s + 1] = coef
    return G


def _as_control_array(seq, horizon, what):
    if seq is None:
        return None
    arr = np.array(
        [c.as_array() if hasattr(c, "as_array") else np.asarray(c, dtype=float) for c in seq]
    )
    if arr.shape != (horizon, 2):
        raise InvalidInputError(f"{what} must have shape ({horizon}, 2), got {arr.shape}")
    return arr


class AnalyticCrowdPredictor:
    """Concrete predictor over a fixed set of humans with known goals."""

    def __init__(self, goals, cfg: PredictorConfig | None = None,
                 dt: float = DT_DEFAULT, v_h_max: float = V_H_MAX_DEFAULT):
        self.goals = np.asarray(goals, dtype=float).reshape(-1, 2)
        self.cfg = cfg if cfg is not None else PredictorConfig()
        self.dt = dt
        self.v_h_max = v_h_max
        self.n_conditioned_calls = 0
        self.n_unconditioned_calls = 0
        # Robot-independent intermediates keyed by (start positions, horizon);
        # purely an evaluation cache, results are bit-identical with or
        # without it.
        self._base_cache = {}
        self._uncond_cache = {}

    @property
    def n_humans(self) -> int:
        return self.goals.shape[0]

    def cheap_variant(self) -> "AnalyticCrowdPredictor":
        """Single-mode variant used as a lightweight warm-start predictor."""
        p = AnalyticCrowdPredictor(self.goals, replace(self.cfg, z_modes=1),
                                   dt=self.dt, v_h_max=self.v_h_max)
        return p

    # -- mode layout ------------------------------------------------------

    def _mode_goals(self) -> np.ndarray:
        """(N, Z, 2) goal hypotheses: true goal plus perturbed variants."""
        Z = self.cfg.z_modes
        out = np.repeat(self.goals[:, None, :], Z, axis=1)
        if Z > 1:
            rho = self.cfg.goal_perturbation_radius
            angles = 2.0 * np.pi * np.arange(Z - 1) / (Z - 1)
            offsets = rho * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
            out[:, 1:, :] += offsets[None, :, :]
        return out

    def _base_rollout(self, p0: np.ndarray, horizon: int) -> np.ndarray:
        """(N, T, 2) goal-attraction-only mean positions at interval starts.

        Robot independent by construction; used as the neighbor positions in
        the inter-human repulsion term so that per-human predictions decouple.
        """
        key = (p0.tobytes(), horizon)
        hit = self._base_cache.get(key)
        if hit is not None:
            return hit
        N = p0.shape[0]
        out = np.empty((N, horizon, 2))
        p = p0.copy()
        for t in range(horizon):
            out[:, t] = p
            pull, _ = _goal_pull(self.goals, p, self.cfg.v_pref)
            mu, _ = _squash(pull, self.v_h_max)
            p = p + self.dt * mu
        if len(self._base_cache) > 64:
            self._base_cache.clear()
        self._base_cache[key] = out
        return out

    # -- forward pass -----------------------------------------------------

    def _forward(self, history: InteractionHistory, robot_future, horizon: int,
                 want_jac: bool):
        """Mean rollout for every (human, mode) pair.

        Returns (means, M) with means (N, Z, T, 2) and, when want_jac, M the
        per-step control-mean Jacobians wrt flattened robot controls,
        (N, Z, T, 2, 2T). Conditioning is active iff robot_future is given.
        """
        cfg = self.cfg
        N, Z, T = self.n_humans, cfg.z_modes, horizon
        if history.n_humans != N:
            raise InvalidInputError(
                f"history has {history.n_humans} humans, predictor expects {N}")
        conditioned = robot_future is not None
        p0 = history.human_positions_now()
        cache_key = None
        if not conditioned and not want_jac:
            cache_key = (p0.tobytes(), T)
            hit = self._uncond_cache.get(cache_key)
            if hit is not None:
                return hit, None
        goals_mode = self._mode_goals()
        base = self._base_rollout(p0, T)
        neighbor_mask = ~np.eye(N, dtype=bool)  # [k, j]: j influences k

        robot_active = conditioned and cfg.robot_repulsion_strength != 0.0
        if robot_active:
            rs = history.robot_now
            R = np.empty((T, 2))
            p, v = rs.position, rs.velocity
            for t in range(T):
                R[t] = p
                p = p + v * self.dt + 0.5 * robot_future[t] * self.dt**2
                v = v + robot_future[t] * self.dt
            if want_jac:
                G = robot_position_jacobians(T, self.dt)

        means = np.empty((N, Z, T, 2))
        M = np.zeros((N, Z, T, 2, 2 * T)) if want_jac else None
        phat = np.repeat(p0[:, None, :], Z, axis=1)
        J = np.zeros((N, Z, 2, 2 * T)) if want_jac else None

        for t in range(T):
            raw, A_p = _goal_pull(goals_mode, phat, cfg.v_pref, want_jac)

            xo = phat[:, :, None, :] - base[None, :, t, :][:, None]  # (N, Z, N, 2)
            rep, rep_jac = _radial_term(
                xo, cfg.repulsion_strength, cfg.repulsion_range, want_jac)
            mask = neighbor_mask[:, None, :, None]
            raw = raw + np.sum(np.where(mask, rep, 0.0), axis=2)
            if want_jac:
                A_p += np.sum(np.where(mask[..., None], rep_jac, 0.0), axis=2)

            if robot_active:
                xr = phat - R[t]
                rterm, rjac = _radial_term(
                    xr, cfg.robot_repulsion_strength, cfg.robot_repulsion_range,
                    want_jac)
                raw = raw + rterm
                if want_jac:
                    A_p += rjac

            mu, S = _squash(raw, self.v_h_max, want_jac)
            means[:, :, t] = mu
            if want_jac:
                draw = np.einsum("nzij,nzjk->nzik", A_p, J)
                if robot_active:
                    draw = draw - np.einsum("nzij,jk->nzik", rjac, G[t])
                dmu = np.einsum("nzij,nzjk->nzik", S, draw)
                M[:, :, t] = dmu
                J = J + self.dt * dmu
            phat = phat + self.dt * mu

        if cache_key is not None:
            if len(self._uncond_cache) > 64:
                self._uncond_cache.clear()
            self._uncond_cache[cache_key] = means
        return means, M

    def _wrap(self, means, horizon, conditioned) -> MultimodalPrediction:
        N, Z = means.shape[0], means.shape[1]
        cov = self.cfg.sigma**2 * np.eye(2)
        covs = np.repeat(cov[None, :, :], horizon, axis=0)
        per_human = [
            [GaussianMode(1.0 / Z, means[k, i].copy(), covs.copy()) for i in range(Z)]
            for k in range(N)
        ]
        return MultimodalPrediction(per_human, horizon, conditioned)

    # -- public API -------------------------------------------------------

    def predict(self, history: InteractionHistory, robot_future=None,
                horizon: int = 12) -> MultimodalPrediction:
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        rf = _as_control_array(robot_future, horizon, "robot_future")
        if rf is None:
            self.n_unconditioned_calls += 1
        else:
            self.n_conditioned_calls += 1
        means, _ = self._forward(history, rf, horizon, want_jac=False)
        return self._wrap(means, horizon, rf is not None)

    def predict_with_jacobians(self, history: InteractionHistory, robot_future,
                               horizon: int = 12):
        """Conditioned prediction plus exact mean Jacobians, (N, Z, T, 2, 2T)."""
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        rf = _as_control_array(robot_future, horizon, "robot_future")
        if rf is None:
            raise InvalidInputError("predict_with_jacobians requires robot_future")
        self.n_conditioned_calls += 1
        means, M = self._forward(history, rf, horizon, want_jac=True)
        return self._wrap(means, horizon, True), M

    def grad_log_density_wrt_robot(self, history: InteractionHistory, robot_future,
                                   human_index: int, u_seq,
                                   horizon: int | None = None) -> np.ndarray:
        """Exact gradient of log_density(predict(...), k, u_seq) wrt controls."""
        rf = np.asarray(
            [c.as_array() if hasattr(c, "as_array") else c for c in robot_future],
            dtype=float)
        T = rf.shape[0] if horizon is None else horizon
        pred, M = self.predict_with_jacobians(history, rf, T)
        if not 0 <= human_index < pred.n_humans:
            raise InvalidInputError(f"human index {human_index} out of range")
        u = _as_control_array(u_seq, T, "u_seq")
        _, grad = log_density_and_grad(pred.per_human[human_index],
                                       M[human_index], u)
        return grad

    def mode_means(self, pred: MultimodalPrediction, human_index: int):
        return mode_means(pred, human_index)


def mode_means(pred: MultimodalPrediction, human_index: int):
    """Per-mode mean control sequences, list of (T, 2)."""
    if not 0 <= human_index < pred.n_humans:
        raise InvalidInputError(f"human index {human_index} out of range")
    return [m.means for m in pred.per_human[human_index]]


def mixture_mean_controls(pred: MultimodalPrediction, human_index: int) -> np.ndarray:
    """Weight-averaged mean control sequence, (T, 2)."""
    modes = pred.per_human[human_index]
    return np.sum([m.weight * m.means for m in modes], axis=0)


def _mode_log_likelihoods(modes, u):
    """Per-mode sum over steps of the Gaussian log-density at u, (Z,)."""
    out = np.empty(len(modes))
    for i, m in enumerate(modes):
        diff = u - m.means
        inv = np.linalg.inv(m.covariances)
        quad = np.einsum("ti,tij,tj->t", diff, inv, diff)
        _, logdet = np.linalg.slogdet(m.covariances)
        out[i] = np.sum(-np.log(2.0 * np.pi) - 0.5 * logdet - 0.5 * quad)
    return out


def log_density(pred: MultimodalPrediction, human_index: int, u_seq) -> float:
    """Log of the Gaussian-mixture density of a control sequence.

    Computed as log-sum-exp over modes of (log weight + per-mode sequence
    log-likelihood).
    """
    if not 0 <= human_index < pred.n_humans:
        raise InvalidInputError(f"human index {human_index} out of range")
    u = _as_control_array(u_seq, pred.horizon, "u_seq")
    modes = pred.per_human[human_index]
    L = _mode_log_likelihoods(modes, u)
    with np.errstate(divide="ignore"):
        logw = np.log(np.array([m.weight for m in modes]))
    a = logw + L
    amax = np.max(a)
    return float(amax + np.log(np.sum(np.exp(a - amax))))


def log_density_and_grad(modes, M_k, u):
    """Mixture log-density at u plus its gradient wrt flattened robot controls.

    M_k holds the per-mode mean Jacobians (Z, T, 2, 2T) from
    predict_with_jacobians.
    """
    L = _mode_log_likelihoods(modes, u)
    with np.errstate(divide="ignore"):
        logw = np.log(np.array([m.weight for m in modes]))
    a = logw + L
    amax = np.max(a)
    w = np.exp(a - amax)
    total = np.sum(w)
    value = float(amax + np.log(total))
    s = w / total
    grad = np.zeros(M_k.shape[-1])
    for i, m in enumerate(modes):
        if s[i] == 0.0:
            continue
        diff = u - m.means
        inv = np.linalg.inv(m.covariances)
        resid = np.einsum("tij,tj->ti", inv, diff)
        grad += s[i] * np.einsum("ti,tik->k", resid, M_k[i])
    return value, grad
