import numpy as np
import pytest

from crowdnav.dynamics import HumanState, RelativeState, RobotControl, RobotState
from crowdnav.errors import GridFormatError, InvalidInputError
from crowdnav.reachability import (
    GridSpec,
    ReachabilityParams,
    default_grid,
    grad_at,
    load_grid,
    multi_agent_value,
    safe_control_constraint,
    safe_constraint_with_grad,
    save_grid,
    solve_brt,
    solve_brt_1d,
    target_level,
    value_at,
)


def test_target_level_examples():
    assert target_level(RelativeState(0.3, 0.0, 0.0, 0.0), 0.3) == pytest.approx(0.0)
    assert target_level(RelativeState(1.0, 0.0, 1.0, -1.0), 0.3) == pytest.approx(0.7)
    assert target_level(RelativeState(0.0, 0.0, 0.0, 0.0), 0.3) == pytest.approx(-0.3)


def test_grid_spec_validation():
    with pytest.raises(InvalidInputError):
        GridSpec((0, 0, 0), (1, 1, 1), (5, 5, 5))          # 3 dims
    with pytest.raises(InvalidInputError):
        GridSpec((0,) * 4, (0,) * 4, (5,) * 4)             # min == max
    with pytest.raises(InvalidInputError):
        GridSpec((0,) * 4, (1,) * 4, (5, 5, 5, 2))         # count < 3


def test_tau_zero_equals_target_level():
    grid = default_grid(pos_count=11, vel_count=5)
    vf = solve_brt(grid, ReachabilityParams(tau=0.0))
    px, py = np.meshgrid(grid.axis(0), grid.axis(1), indexing="ij")
    l = np.sqrt(px**2 + py**2) - 0.3
    assert np.array_equal(vf.values, np.broadcast_to(l[..., None, None],
                                                     grid.counts))


def test_tube_monotone_in_tau_and_below_l(coarse_vf):
    grid = coarse_vf.grid
    short = solve_brt(grid, ReachabilityParams(tau=0.5))
    px, py = np.meshgrid(grid.axis(0), grid.axis(1), indexing="ij")
    l = np.broadcast_to((np.sqrt(px**2 + py**2) - 0.3)[..., None, None],
                        grid.counts)
    assert np.all(coarse_vf.values <= short.values + 1e-12)
    assert np.all(coarse_vf.values <= l + 1e-12)
    assert np.all(coarse_vf.values[l <= 0] <= 0 + 1e-12)


@pytest.mark.parametrize("tau", [0.25, 0.5, 1.0])
def test_1d_analytic_oracle(tau):
    """Degenerate pursuit: boundary at |p| = r + 0.5 tau within one cell."""
    xs, V = solve_brt_1d(5.0, 201, 0.3, tau)
    cell = xs[1] - xs[0]
    expect = 0.3 + 0.5 * tau
    crossing_idx = np.nonzero(np.diff(np.sign(V)))[0]
    crossings = np.abs(xs[crossing_idx])
    assert len(crossings) >= 2
    assert np.all(np.abs(crossings - expect) <= cell + 1e-12)


def test_value_at_node_exactness_and_linearity(coarse_vf):
    grid = coarse_vf.grid
    i = (3, 4, 2, 3)
    node = RelativeState(*[grid.axis(d)[i[d]] for d in range(4)])
    assert value_at(coarse_vf, node) == pytest.approx(
        float(coarse_vf.values[i]), abs=1e-12)
    # midpoint along prx between nodes i and i+1
    mid = RelativeState(0.5 * (grid.axis(0)[3] + grid.axis(0)[4]),
                        grid.axis(1)[4], grid.axis(2)[2], grid.axis(3)[3])
    expect = 0.5 * (coarse_vf.values[3, 4, 2, 3] + coarse_vf.values[4, 4, 2, 3])
    assert value_at(coarse_vf, mid) == pytest.approx(expect, abs=1e-12)


def test_value_at_out_of_grid_clamps_and_flags(coarse_vf):
    v, clamped = value_at(coarse_vf, RelativeState(100.0, 0.0, 0.0, 0.0),
                          return_clamped=True)
    assert clamped
    edge = value_at(coarse_vf, RelativeState(coarse_vf.grid.maxs[0], 0.0, 0.0, 0.0))
    assert v == pytest.approx(edge)


def test_far_value_close_to_target_level(coarse_vf):
    """Far from the tube the value function approaches the signed distance."""
    for p in ((4.5, 0.0), (0.0, 4.5), (3.2, -3.2)):
        x = RelativeState(p[0], p[1], 0.0, 0.0)
        assert value_at(coarse_vf, x) > 0.5 * target_level(x, 0.3)


def test_grad_at_signed_distance(coarse_vf):
    grid = coarse_vf.grid
    vf0 = solve_brt(grid, ReachabilityParams(tau=0.0))
    g = grad_at(vf0, RelativeState(2.0, 0.0, 0.0, 0.0))
    assert g[0] == pytest.approx(1.0, abs=0.05)
    assert abs(g[1]) < 1e-9
    # reflection antisymmetry of the prx gradient
    g2 = grad_at(vf0, RelativeState(-2.0, 0.0, 0.0, 0.0))
    assert g2[0] == pytest.approx(-g[0], abs=1e-9)


def test_grad_nonzero_outside_tube(coarse_vf):
    cell = coarse_vf.grid.spacings[0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(-4, 4, 2)
        if np.linalg.norm(p) <= 0.3 + 2 * cell:
            continue
        g = grad_at(coarse_vf, RelativeState(p[0], p[1],
                                             *rng.uniform(-1.5, 1.5, 2)))
        assert np.linalg.norm(g) > 0.0


def test_multi_agent_value_min_and_ties(coarse_vf):
    robot = RobotState(0.0, 0.0, 0.0, 0.0)
    humans = [HumanState(3.0, 0.0), HumanState(0.5, 0.0), HumanState(0.5, 0.0)]
    v, idx = multi_agent_value(coarse_vf, robot, humans)
    brute = min(value_at(coarse_vf, RelativeState(h.px, h.py, 0.0, 0.0))
                for h in humans)
    assert v == pytest.approx(brute)
    assert idx == 1    # lowest index among the duplicate closest pair
    # adding a distant human never decreases the min
    v2, _ = multi_agent_value(coarse_vf, robot, humans + [HumanState(4.5, 4.5)])
    assert v2 >= v - 1e-12
    # empty list -> +inf sentinel
    v3, idx3 = multi_agent_value(coarse_vf, robot, [])
    assert v3 == np.inf and idx3 is None


def test_safe_constraint_far_human_inactive(coarse_vf):
    q = safe_control_constraint(coarse_vf, RelativeState(4.9, 0.0, 0.0, 0.0),
                                RobotControl(0.0, 0.0), 0.4, 0.0)
    assert not q.active
    assert q.constraint_value > 0


def test_safe_constraint_slack_dominance(coarse_vf):
    x = RelativeState(0.4, 0.0, 0.5, 0.0)
    for u in (RobotControl(0, 0), RobotControl(2, 0), RobotControl(-2, 0)):
        q = safe_control_constraint(coarse_vf, x, u, 0.4, eta=100.0)
        assert q.constraint_value >= 0
    with pytest.raises(InvalidInputError):
        safe_control_constraint(coarse_vf, x, RobotControl(0, 0), 0.4, -1.0)


def test_safe_constraint_min_property(coarse_vf):
    """The K-candidate min is <= the value at u_H = 0."""
    from crowdnav.reachability import _next_relative
    x = RelativeState(0.6, 0.2, 0.4, -0.1)
    u = RobotControl(1.0, 0.0)
    q = safe_control_constraint(coarse_vf, x, u, 0.4, 0.0)
    nxt = _next_relative(x.as_array(), u.as_array(), np.zeros(2), 0.4)
    at_zero = value_at(coarse_vf, RelativeState(*nxt))
    assert q.constraint_value <= at_zero + 1e-12
    # the reported adversary respects the human speed bound (interior minima
    # are possible, so full speed is not guaranteed)
    assert np.linalg.norm(q.worst_case_human.as_array()) <= 2.5 + 1e-12


def test_safe_constraint_grad_matches_fd(coarse_vf):
    x = RelativeState(0.7, 0.3, 0.2, 0.1)
    u = np.array([0.5, -0.3])
    q, dg = safe_constraint_with_grad(coarse_vf, x, u, 0.4, 0.0)
    h = 1e-5
    for i in range(2):
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        qu = safe_control_constraint(coarse_vf, x, RobotControl(*up), 0.4, 0.0)
        qd = safe_control_constraint(coarse_vf, x, RobotControl(*dn), 0.4, 0.0)
        fd = (qu.constraint_value - qd.constraint_value) / (2 * h)
        # piecewise-linear interpolant: compare loosely
        assert dg[i] == pytest.approx(fd, abs=0.05)


def test_grid_io_round_trip(coarse_vf, tmp_path):
    p = tmp_path / "v.hjvf"
    save_grid(coarse_vf, p)
    again = load_grid(p)
    assert np.array_equal(again.values, coarse_vf.values)
    assert again.grid == coarse_vf.grid
    assert again.tau == coarse_vf.tau
    assert again.params.r == coarse_vf.params.r
    # byte-identical rewrite
    p2 = tmp_path / "v2.hjvf"
    save_grid(again, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_grid_io_corruption(coarse_vf, tmp_path):
    p = tmp_path / "v.hjvf"
    save_grid(coarse_vf, p)
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.hjvf"

    raw_magic = raw.copy()
    raw_magic[:4] = b"NOPE"
    bad.write_bytes(bytes(raw_magic))
    with pytest.raises(GridFormatError, match="magic"):
        load_grid(bad)

    bad.write_bytes(bytes(raw[:-16]))      # truncated payload
    with pytest.raises(GridFormatError, match="values"):
        load_grid(bad)

    bad.write_bytes(bytes(raw) + b"\x00" * 8)   # trailing garbage
    with pytest.raises(GridFormatError, match="trailing"):
        load_grid(bad)
