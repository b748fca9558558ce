import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdnav.dynamics import (
    HumanControl,
    HumanState,
    RobotControl,
    RobotState,
    StepParams,
    clamp_norm,
    clamp_robot_control,
    relative_state,
    rollout_robot,
    rollout_robot_array,
    step_human,
    step_robot,
)
from crowdnav.errors import InvalidInputError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_step_robot_exact_zoh():
    x = RobotState(1.0, -2.0, 0.5, 1.5)
    u = RobotControl(2.0, -1.0)
    nxt = step_robot(x, u, StepParams(0.4))
    # p+ = p + v dt + u dt^2 / 2, v+ = v + u dt
    assert nxt.px == pytest.approx(1.0 + 0.5 * 0.4 + 0.5 * 2.0 * 0.16)
    assert nxt.py == pytest.approx(-2.0 + 1.5 * 0.4 - 0.5 * 0.16)
    assert nxt.vx == pytest.approx(0.5 + 2.0 * 0.4)
    assert nxt.vy == pytest.approx(1.5 - 0.4)


def test_step_human_single_integrator():
    nxt = step_human(HumanState(1.0, 1.0), HumanControl(-1.0, 2.0),
                     StepParams(0.4))
    assert nxt.px == pytest.approx(0.6)
    assert nxt.py == pytest.approx(1.8)


@given(px=finite, py=finite, vx=finite, vy=finite, ax=finite, ay=finite)
def test_zoh_matches_two_half_steps_in_velocity(px, py, vx, vy, ax, ay):
    """Velocity is linear in time, position quadratic: stepping dt once equals
    stepping dt/2 twice under the exact ZOH map."""
    x = RobotState(px, py, vx, vy)
    u = RobotControl(ax, ay)
    whole = step_robot(x, u, StepParams(0.4))
    halves = step_robot(step_robot(x, u, StepParams(0.2)), u, StepParams(0.2))
    assert np.allclose(whole.as_array(), halves.as_array(), rtol=1e-12,
                       atol=1e-9)


def test_rollout_lengths_and_consistency():
    x0 = RobotState(0.0, 0.0, 1.0, 0.0)
    us = [RobotControl(0.1 * t, -0.05 * t) for t in range(5)]
    states = rollout_robot(x0, us)
    assert len(states) == 6
    arr = rollout_robot_array(x0.as_array(), np.array([u.as_array() for u in us]), 0.4)
    assert arr.shape == (6, 4)
    assert np.allclose(arr[-1], states[-1].as_array())


def test_relative_state_convention():
    rel = relative_state(RobotState(1.0, 2.0, 0.3, -0.4), HumanState(4.0, 0.0))
    assert rel.as_array() == pytest.approx([3.0, -2.0, 0.3, -0.4])


def test_non_finite_rejected():
    with pytest.raises(InvalidInputError):
        step_robot(RobotState(np.nan, 0, 0, 0), RobotControl(0, 0))
    with pytest.raises(InvalidInputError):
        step_human(HumanState(0, 0), HumanControl(np.inf, 0))
    with pytest.raises(InvalidInputError):
        StepParams(0.0)


@given(ax=finite, ay=finite, bound=st.floats(0.1, 10))
def test_clamp_is_projection(ax, ay, bound):
    c = clamp_robot_control(RobotControl(ax, ay), bound)
    n = np.hypot(c.ax, c.ay)
    assert n <= bound + 1e-12
    if np.hypot(ax, ay) <= bound:
        assert (c.ax, c.ay) == (ax, ay)
    elif np.hypot(ax, ay) > 0:
        # direction preserved
        assert ax * c.ay - ay * c.ax == pytest.approx(0.0, abs=1e-6)


def test_clamp_norm_matches_scalar_version():
    vs = np.array([[3.0, 4.0], [0.1, 0.0], [0.0, 0.0]])
    out = clamp_norm(vs, 1.0)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.allclose(out[1], [0.1, 0.0])
    assert np.allclose(out[2], [0.0, 0.0])
