"""
test_control.py

Tests for Riccati synthesis, the LQR tracking law and the four-zone rule engine.
"""

import math

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from control import (
    LqrConfig,
    ScenarioConfig,
    Zone,
    dare_residual,
    desired_state,
    design_gain,
    lqr_boundary_speed,
    lqr_command,
    scenario_speed,
    solve_dare,
    speed_tracking_sequence,
)
from dynamics import platoon_model
from errors import ConfigError, InputError

Q = 1000.0 * np.eye(3)
R = np.eye(2)


def hand_iterated_scalar(a, b, q, r, iterations=2000):
    p = q
    for _ in range(iterations):
        p = q + a * p * a - (a * p * b) ** 2 / (r + b * p * b)
    return p


def test_scalar_dare_matches_hand_iteration():
    gain = solve_dare(0.5, 1.0, 1.0, 1.0)
    p = hand_iterated_scalar(0.5, 1.0, 1.0, 1.0)
    assert gain.P[0, 0] == pytest.approx(p, abs=1e-10)
    assert gain.F[0, 0] == pytest.approx(0.5 * p / (1.0 + p), abs=1e-10)


def test_deadbeat_plant():
    gain = solve_dare(np.zeros((2, 2)), np.eye(2), np.diag([2.0, 3.0]), np.eye(2))
    np.testing.assert_allclose(gain.P, np.diag([2.0, 3.0]))
    np.testing.assert_allclose(gain.F, np.zeros((2, 2)))


@pytest.mark.parametrize("T", [0.01, 0.1, 0.5])
def test_platoon_dare_residual_and_stability(T):
    model = platoon_model(T)
    gain = solve_dare(model.Ad, model.Bd, Q, R)
    assert dare_residual(gain.P, model.Ad, model.Bd, Q, R) <= 1e-9
    assert gain.closed_loop_radius(model.Ad, model.Bd) < 1.0
    np.testing.assert_allclose(gain.P, gain.P.T)
    assert np.linalg.eigvalsh(gain.P).min() >= -1e-9


def test_platoon_dare_matches_scipy():
    model = platoon_model(0.1)
    gain = solve_dare(model.Ad, model.Bd, Q, R)
    P = solve_discrete_are(model.Ad, model.Bd, Q, R)
    np.testing.assert_allclose(gain.P, P, rtol=1e-7)


def test_gain_invariant_to_weight_scaling():
    model = platoon_model(0.1)
    a = solve_dare(model.Ad, model.Bd, Q, R)
    b = solve_dare(model.Ad, model.Bd, 7.0 * Q, 7.0 * R)
    np.testing.assert_allclose(a.F, b.F, atol=1e-9)


def test_singular_r_rejected():
    model = platoon_model(0.1)
    with pytest.raises(InputError):
        solve_dare(model.Ad, model.Bd, Q, np.zeros((2, 2)))


def test_weights_validated_in_config():
    with pytest.raises(ConfigError):
        LqrConfig(R=((1.0, 0.0), (0.0, -1.0)))
    with pytest.raises(ConfigError):
        LqrConfig(Q=((1.0, 2.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)))


@pytest.fixture(scope="module")
def gain():
    return design_gain(platoon_model(0.1), LqrConfig())


def test_command_at_equilibrium(gain):
    x = np.array([0.1, 0.3, 0.3])
    np.testing.assert_array_equal(lqr_command(gain, x, x), np.zeros(2))


def test_command_linear_before_clamp(gain):
    x_des = np.array([0.1, 0.3, 0.3])
    e = np.array([1e-4, -2e-4, 1e-4])
    u1 = lqr_command(gain, x_des + e, x_des, a_max=1e9)
    u2 = lqr_command(gain, x_des + 2 * e, x_des, a_max=1e9)
    np.testing.assert_allclose(u2, 2 * u1, rtol=1e-12)


def test_gap_error_accelerates_follower(gain):
    u = lqr_command(gain, [1.0, 0.0, 0.0], [0.1, 0.0, 0.0])
    assert u[1] > 0.0
    assert np.all(np.abs(u) <= 1.0)


def test_closed_loop_converges_to_desired_gap(gain):
    model = platoon_model(0.1)
    x = np.array([1.0, 0.0, 0.0])
    x_des = np.array([0.1, 0.3, 0.3])
    inside_since = None
    for k in range(600):
        u = lqr_command(gain, x, x_des)
        x = model.Ad @ x + model.Bd @ u
        inside = abs(x[0] - 0.1) < 0.01
        if inside and inside_since is None:
            inside_since = k
        elif not inside:
            inside_since = None
    assert inside_since is not None and inside_since * 0.1 <= 30.0


def test_desired_state_tracks_leader():
    np.testing.assert_array_equal(desired_state(LqrConfig(), 0.42), [0.1, 0.42, 0.42])
    np.testing.assert_array_equal(desired_state(LqrConfig(desired_speed_mps=0.3), 0.42), [0.1, 0.3, 0.3])


def test_boundary_speed_limits(gain):
    x = np.array([0.5, 0.45, 0.45])
    v = lqr_boundary_speed(gain, x, desired_state(LqrConfig(), 0.45), 0.1, 0.1)
    assert 0.0 <= v <= 1.0


@pytest.mark.parametrize("gap, zone, v", [
    (1.5, Zone.LEADER, 0.45),
    (math.inf, Zone.LEADER, 0.45),
    (1.0, Zone.LQR, None),
    (0.5, Zone.LQR, None),
    (0.10, Zone.LINEAR, 0.4),
    (0.08, Zone.LINEAR, 0.2),
    (0.06, Zone.STOP, 0.0),
    (0.05, Zone.STOP, 0.0),
    (0.0, Zone.STOP, 0.0),
])
def test_scenario_zones(gap, zone, v):
    decision = scenario_speed(gap, ScenarioConfig(), 0.5, v_boundary=0.4)
    assert decision.zone == zone
    if v is None:
        assert decision.v is None
    else:
        assert decision.v == pytest.approx(v)


def test_linear_zone_continuous_with_stop():
    just_above = scenario_speed(0.06 + 1e-12, ScenarioConfig(), 0.5, v_boundary=0.4)
    assert just_above.zone == Zone.LINEAR
    assert just_above.v == pytest.approx(0.0, abs=1e-9)


def test_linear_zone_monotone():
    gaps = np.linspace(0.0601, 0.1, 50)
    speeds = [scenario_speed(g, ScenarioConfig(), 0.5, v_boundary=0.4).v for g in gaps]
    assert all(b >= a for a, b in zip(speeds, speeds[1:]))


def test_negative_gap_rejected():
    with pytest.raises(InputError):
        scenario_speed(-0.01, ScenarioConfig(), 0.5)


def test_zone_order_validated():
    with pytest.raises(ConfigError):
        ScenarioConfig(stop_zone_m=0.2)
    with pytest.raises(ConfigError):
        ScenarioConfig(zone_hysteresis_m=0.05)


@pytest.mark.parametrize("gap, previous, zone", [
    (0.09, Zone.LQR, Zone.LQR),
    (0.081, Zone.LQR, Zone.LQR),
    (0.079, Zone.LQR, Zone.LINEAR),
    (0.09, Zone.LINEAR, Zone.LINEAR),
    (0.09, None, Zone.LINEAR),
    (1.4, Zone.LQR, Zone.LQR),
    (1.6, Zone.LQR, Zone.LEADER),
    (1.4, Zone.LEADER, Zone.LEADER),
    (0.5, Zone.LINEAR, Zone.LQR),
    (0.05, Zone.LQR, Zone.STOP),
])
def test_lqr_zone_hysteresis(gap, previous, zone):
    assert scenario_speed(gap, ScenarioConfig(), 0.5, v_boundary=0.4, previous=previous).zone == zone


def test_speed_tracking_ramp():
    commands = speed_tracking_sequence(0.0, 0.45, 0.1, 6, a_max=1.0)
    assert commands[:4] == [1.0, 1.0, 1.0, 1.0]
    assert commands[4] == pytest.approx(0.5)
    assert commands[5] == pytest.approx(0.0, abs=1e-12)
