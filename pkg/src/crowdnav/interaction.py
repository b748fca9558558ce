"""Invasiveness cost of a candidate robot plan.

The cost sums, over the attended humans and over the modes of the
robot-free prediction, the negative log-likelihood of each mode-mean control
sequence under the robot-conditioned mixture. Its gradient with respect to
the robot's future controls is exact, assembled from the predictor's mean
Jacobians. Values are in nats; no normalization by the number of humans or
modes is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .predictor import (
    AnalyticCrowdPredictor,
    InteractionHistory,
    log_density,
    log_density_and_grad,
    mode_means,
)


@dataclass
class InteractionCostResult:
    value: float
    gradient: np.ndarray       # (2T,)
    per_human_terms: list      # one scalar per attended human, in index order


def _normalize_future(robot_future) -> np.ndarray:
    arr = np.array(
        [c.as_array() if hasattr(c, "as_array") else np.asarray(c, dtype=float)
         for c in robot_future])
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError("robot_future must be a sequence of 2-vectors")
    return arr


def j_int(robot_future, history: InteractionHistory,
          predictor: AnalyticCrowdPredictor, attention_set) -> InteractionCostResult:
    """Interaction cost and its exact gradient wrt flattened robot controls."""
    rf = _normalize_future(robot_future)
    T = rf.shape[0]
    attention = sorted(set(attention_set))
    if any(k < 0 or k >= history.n_humans for k in attention):
        raise InvalidInputError("attention set contains an out-of-range index")
    if not attention:
        return InteractionCostResult(0.0, np.zeros(2 * T), [])

    uncond = predictor.predict(history, None, T)
    cond, M = predictor.predict_with_jacobians(history, rf, T)

    value = 0.0
    grad = np.zeros(2 * T)
    per_human = []
    for k in attention:
        term = 0.0
        for ubar in mode_means(uncond, k):
            ld, g = log_density_and_grad(cond.per_human[k], M[k], ubar)
            term -= ld
            grad -= g
        value += term
        per_human.append(term)
    return InteractionCostResult(value, grad, per_human)


def j_int_value(robot_future, history, predictor, attention_set) -> float:
    """Value-only evaluation (no Jacobian pass); used in line searches."""
    rf = _normalize_future(robot_future)
    T = rf.shape[0]
    attention = sorted(set(attention_set))
    if not attention:
        return 0.0
    uncond = predictor.predict(history, None, T)
    cond = predictor.predict(history, rf, T)
    value = 0.0
    for k in attention:
        for ubar in mode_means(uncond, k):
            value -= log_density(cond, k, ubar)
    return value


def j_int_baseline(history: InteractionHistory, predictor, attention_set,
                   horizon: int = 12) -> float:
    """Interaction cost floor: conditioned distribution replaced by the
    unconditioned one. Independent of any robot plan."""
    attention = sorted(set(attention_set))
    if not attention:
        return 0.0
    uncond = predictor.predict(history, None, horizon)
    value = 0.0
    for k in attention:
        for ubar in mode_means(uncond, k):
            value -= log_density(uncond, k, ubar)
    return value
