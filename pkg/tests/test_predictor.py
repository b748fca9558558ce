import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdnav.errors import InvalidInputError
from crowdnav.dynamics import HumanState, RobotState
from crowdnav.predictor import (
    AnalyticCrowdPredictor,
    InteractionHistory,
    PredictorConfig,
    log_density,
    mixture_mean_controls,
    mode_means,
)

from conftest import fd_gradient, make_history, make_predictor


def one_human_history(pos=(0.0, 0.0), robot=(1e6, 1e6, 0.0, 0.0)):
    return InteractionHistory.initial(RobotState(*robot), [HumanState(*pos)])


# -- predict ------------------------------------------------------------------

def test_isolated_human_mean_is_vpref_towards_goal():
    pred = AnalyticCrowdPredictor(np.array([[10.0, 0.0]]),
                                  PredictorConfig(z_modes=1))
    out = pred.predict(one_human_history(), None, 6)
    means = out.per_human[0][0].means
    # goal pull alone, below the speed knee: exactly (v_pref, 0) every step
    assert np.allclose(means, [[1.3, 0.0]] * 6, atol=1e-9)


def test_far_robot_conditioning_negligible():
    pred = make_predictor()
    hist = make_history(robot=(1e6, 1e6, 0.0, 0.0))
    rf = np.full((5, 2), 0.5)
    uncond = pred.predict(hist, None, 5)
    cond = pred.predict(hist, rf, 5)
    for k in range(2):
        for mu, mc in zip(mode_means(uncond, k), mode_means(cond, k)):
            assert np.max(np.abs(mu - mc)) < 1e-9


def test_uniform_weights_sum_to_one():
    pred = make_predictor(z_modes=4)
    out = pred.predict(make_history(), None, 3)
    for modes in out.per_human:
        ws = [m.weight for m in modes]
        assert ws == pytest.approx([0.25] * 4)
        assert sum(ws) == pytest.approx(1.0, abs=1e-9)


def test_conditioned_flag_and_shapes():
    pred = make_predictor(z_modes=3)
    out = pred.predict(make_history(), np.zeros((4, 2)), 4)
    assert out.conditioned and out.horizon == 4
    assert out.n_humans == 2 and out.z_modes == 3
    for modes in out.per_human:
        for m in modes:
            assert m.means.shape == (4, 2)
            assert m.covariances.shape == (4, 2, 2)
            assert np.allclose(m.covariances, 0.25 * np.eye(2))


def test_horizon_mismatch_rejected():
    pred = make_predictor()
    with pytest.raises(InvalidInputError):
        pred.predict(make_history(), np.zeros((3, 2)), 4)
    with pytest.raises(InvalidInputError):
        pred.predict(make_history(), None, 0)


@given(seed=st.integers(0, 500))
@settings(max_examples=25, deadline=None)
def test_means_bounded_by_vhmax(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    pred = AnalyticCrowdPredictor(rng.uniform(-5, 5, (n, 2)),
                                  PredictorConfig(z_modes=int(rng.integers(1, 4))))
    hist = InteractionHistory.initial(
        RobotState(*rng.uniform(-5, 5, 2), 0.0, 0.0),
        [HumanState(*p) for p in rng.uniform(-5, 5, (n, 2))])
    out = pred.predict(hist, rng.uniform(-2, 2, (5, 2)), 5)
    for modes in out.per_human:
        for m in modes:
            assert np.all(np.linalg.norm(m.means, axis=1) <= 2.5 + 1e-12)


def test_ar_zero_conditioning_bit_identical():
    pred = make_predictor(robot_repulsion_strength=0.0)
    hist = make_history(robot=(0.5, 0.5, 0.0, 0.0))
    uncond = pred.predict(hist, None, 6)
    cond = pred.predict(hist, np.full((6, 2), 1.0), 6)
    for k in range(2):
        for mu, mc in zip(mode_means(uncond, k), mode_means(cond, k)):
            assert np.array_equal(mu, mc)


def test_mode_goals_perturbation_layout():
    pred = make_predictor(z_modes=3, goal_perturbation_radius=1.0)
    g = pred._mode_goals()
    assert g.shape == (2, 3, 2)
    assert np.allclose(g[:, 0], pred.goals)                      # true goal
    offsets = g[0, 1:] - pred.goals[0]
    assert np.allclose(np.linalg.norm(offsets, axis=1), 1.0)     # on the circle


# -- log_density --------------------------------------------------------------

def test_log_density_at_mode_mean_closed_form():
    pred = AnalyticCrowdPredictor(np.array([[10.0, 0.0]]),
                                  PredictorConfig(z_modes=1, sigma=0.5))
    out = pred.predict(one_human_history(), None, 2)
    mu = out.per_human[0][0].means
    # product of two standard-form Gaussian peaks: 2 * (-log(2 pi sigma^2))
    expect = 2.0 * (-np.log(2.0 * np.pi * 0.25))
    assert log_density(out, 0, mu) == pytest.approx(expect, abs=1e-6)
    assert log_density(out, 0, mu) == pytest.approx(-0.903166, abs=1e-5)


def test_identical_modes_degenerate_to_single():
    pred1 = AnalyticCrowdPredictor(np.array([[10.0, 0.0]]),
                                   PredictorConfig(z_modes=1))
    out1 = pred1.predict(one_human_history(), None, 2)
    out2 = pred1.predict(one_human_history(), None, 2)
    # duplicate the single mode with halved weights
    from copy import deepcopy
    dup = deepcopy(out1)
    clone = deepcopy(dup.per_human[0][0])
    dup.per_human[0][0].weight = 0.5
    clone.weight = 0.5
    dup.per_human[0].append(clone)
    u = out2.per_human[0][0].means
    assert log_density(dup, 0, u) == pytest.approx(log_density(out1, 0, u),
                                                   abs=1e-12)


def test_log_density_decreases_away_from_means():
    pred = make_predictor(z_modes=2)
    out = pred.predict(make_history(), None, 3)
    mu = out.per_human[0][0].means
    base = log_density(out, 0, mu)
    for shift in (0.3, 1.0, 2.5):
        assert log_density(out, 0, mu + shift) < base


def test_log_density_index_out_of_range():
    pred = make_predictor()
    out = pred.predict(make_history(), None, 2)
    with pytest.raises(InvalidInputError):
        log_density(out, 5, np.zeros((2, 2)))


def test_horizon1_density_normalizes():
    """Dense quadrature of exp(log_density) over a 12-sigma box around the
    means integrates to 1 (the mixture is a proper 2-D density at horizon 1)."""
    pred = make_predictor(z_modes=2)
    out = pred.predict(make_history(), None, 1)
    sigma = 0.5
    centers = np.array([m.means[0] for m in out.per_human[0]])
    lo = centers.min(axis=0) - 6 * sigma
    hi = centers.max(axis=0) + 6 * sigma
    n = 400
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vals = np.empty_like(X)
    for i in range(n):
        pts = np.stack([X[i], Y[i]], axis=-1)[:, None, :]
        vals[i] = [np.exp(log_density(out, 0, p)) for p in pts]
    integral = np.trapezoid(np.trapezoid(vals, ys, axis=1), xs)
    assert integral == pytest.approx(1.0, abs=1e-4)


# -- gradients ----------------------------------------------------------------

def test_grad_log_density_zero_when_ar_zero():
    pred = make_predictor(robot_repulsion_strength=0.0)
    hist = make_history(robot=(0.5, 0.0, 0.0, 0.0))
    u = pred.predict(hist, None, 4).per_human[0][0].means
    g = pred.grad_log_density_wrt_robot(hist, np.full((4, 2), 0.3), 0, u)
    assert np.array_equal(g, np.zeros(8))


def test_grad_log_density_far_robot_negligible():
    pred = make_predictor()
    hist = make_history(robot=(1e6, 1e6, 0.0, 0.0))
    u = pred.predict(hist, None, 4).per_human[0][0].means
    g = pred.grad_log_density_wrt_robot(hist, np.full((4, 2), 0.3), 0, u)
    assert np.max(np.abs(g)) < 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_grad_log_density_matches_fd(seed):
    rng = np.random.default_rng(seed)
    z = [1, 2, 4][seed % 3]
    T = int(rng.integers(2, 9))
    pred = AnalyticCrowdPredictor(rng.uniform(-5, 5, (2, 2)),
                                  PredictorConfig(z_modes=z))
    hist = InteractionHistory.initial(
        RobotState(*rng.uniform(-3, 3, 2), *rng.uniform(-1, 1, 2)),
        [HumanState(*p) for p in rng.uniform(-5, 5, (2, 2))])
    rf = rng.uniform(-1.5, 1.5, (T, 2))
    k = int(rng.integers(0, 2))
    useq = rng.normal(0.0, 1.0, (T, 2))
    analytic = pred.grad_log_density_wrt_robot(hist, rf, k, useq)

    def f(u_flat):
        return log_density(pred.predict(hist, u_flat, T), k, useq)

    fd = fd_gradient(f, rf, h=1e-5)
    denom = max(np.linalg.norm(fd), 1e-10)
    assert np.linalg.norm(analytic - fd) / denom <= 1e-4


# -- helpers ------------------------------------------------------------------

def test_mode_means_count_and_identity():
    pred = make_predictor(z_modes=3)
    out = pred.predict(make_history(), None, 4)
    ms = mode_means(out, 1)
    assert len(ms) == 3
    for got, mode in zip(ms, out.per_human[1]):
        assert got is mode.means
    with pytest.raises(InvalidInputError):
        mode_means(out, 7)


def test_mixture_mean_controls_weighting():
    pred = make_predictor(z_modes=2)
    out = pred.predict(make_history(), None, 3)
    expect = 0.5 * out.per_human[0][0].means + 0.5 * out.per_human[0][1].means
    assert np.allclose(mixture_mean_controls(out, 0), expect)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        PredictorConfig(z_modes=0)
    with pytest.raises(InvalidInputError):
        PredictorConfig(sigma=0.0)
    with pytest.raises(InvalidInputError):
        PredictorConfig(repulsion_range=-1.0)


def test_cheap_variant_single_mode_same_goals():
    pred = make_predictor(z_modes=3)
    cheap = pred.cheap_variant()
    assert cheap.cfg.z_modes == 1
    assert np.array_equal(cheap.goals, pred.goals)


def test_uncond_cache_is_transparent():
    pred = make_predictor()
    hist = make_history()
    a = pred.predict(hist, None, 5)
    b = pred.predict(hist, None, 5)
    for k in range(2):
        for ma, mb in zip(mode_means(a, k), mode_means(b, k)):
            assert np.array_equal(ma, mb)
    assert pred.n_unconditioned_calls == 2
