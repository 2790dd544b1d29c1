"""
test_dynamics.py

Tests for the pair model discretization and the per-vehicle integrator.
"""

import math

import numpy as np
import pytest
from scipy.linalg import expm

from dynamics import (
    A_PLATOON,
    B_PLATOON,
    VehicleLongState,
    discretize,
    forward_gap,
    platoon_model,
    platoon_state,
    step_vehicle,
)
from errors import SimulationFault


def test_platoon_constants():
    assert A_PLATOON.tolist() == [[0, 1, -1], [0, 0, 0], [0, 0, 0]]
    assert B_PLATOON.tolist() == [[0, 0], [1, 0], [0, 1]]


def test_discretize_at_100ms():
    Ad, Bd = discretize(A_PLATOON, B_PLATOON, 0.1)
    np.testing.assert_allclose(Ad, [[1, 0.1, -0.1], [0, 1, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(Bd, [[0.005, -0.005], [0.1, 0], [0, 0.1]], atol=1e-15)


def test_discretize_identity_limit():
    Ad, Bd = discretize(A_PLATOON, B_PLATOON, 1e-12)
    np.testing.assert_allclose(Ad, np.eye(3), atol=1e-11)
    np.testing.assert_allclose(Bd, np.zeros((3, 2)), atol=1e-11)


def test_discretize_general_matches_series():
    rng = np.random.default_rng(1)
    for n in (1, 2, 3, 4):
        A = rng.normal(size=(n, n)) - 2.0 * np.eye(n)
        B = rng.normal(size=(n, 2))
        T = 0.1
        M = np.zeros((n + 2, n + 2))
        M[:n, :n] = A
        M[:n, n:] = B
        E = np.eye(n + 2)
        term = np.eye(n + 2)
        for k in range(1, 20):
            term = term @ M * T / k
            E = E + term
        Ad, Bd = discretize(A, B, T)
        np.testing.assert_allclose(Ad, E[:n, :n], atol=1e-12)
        np.testing.assert_allclose(Bd, E[:n, n:], atol=1e-12)


def test_platoon_model_matches_expm():
    model = platoon_model(0.25)
    M = np.zeros((5, 5))
    M[:3, :3] = A_PLATOON
    M[:3, 3:] = B_PLATOON
    E = expm(M * 0.25)
    np.testing.assert_allclose(model.Ad, E[:3, :3], atol=1e-14)
    np.testing.assert_allclose(model.Bd, E[:3, 3:], atol=1e-14)


def test_step_at_rest():
    assert step_vehicle(VehicleLongState(), 0.0, 0.1) == VehicleLongState()


def test_step_uniform_motion():
    state = step_vehicle(VehicleLongState(s=0.0, v=0.5), 0.0, 0.1)
    assert state.s == pytest.approx(0.05)
    assert state.v == 0.5


def test_step_braking_to_rest():
    state = step_vehicle(VehicleLongState(s=0.0, v=0.05), -1.0, 0.1)
    assert state.v == 0.0
    assert state.s == pytest.approx(0.00125, abs=1e-15)


def test_step_speed_saturation():
    state = step_vehicle(VehicleLongState(s=0.0, v=0.95), 1.0, 0.1, v_max=1.0)
    assert state.v == 1.0
    # 0.05 s accelerating, then 0.05 s at v_max
    assert state.s == pytest.approx(0.95 * 0.05 + 0.5 * 0.05 ** 2 + 0.05, abs=1e-12)


def test_step_matches_substepped_integration():
    rng = np.random.default_rng(2)
    T = 0.1
    for _ in range(200):
        v0 = rng.uniform(0, 1)
        a = rng.uniform(-2, 2)
        state = step_vehicle(VehicleLongState(s=0.0, v=v0), a, T)
        s, v, dt = 0.0, v0, T / 100
        for _ in range(100):
            v_next = min(max(v + a * dt, 0.0), 1.0)
            # exact within a substep unless the clamp hits inside it
            if v + a * dt < 0.0:
                s += v * (v / -a) / 2.0
            elif v + a * dt > 1.0:
                t_sat = (1.0 - v) / a
                s += v * t_sat + 0.5 * a * t_sat ** 2 + (dt - t_sat)
            else:
                s += v * dt + 0.5 * a * dt * dt
            v = v_next
        assert state.s == pytest.approx(s, abs=1e-9)
        assert state.v == pytest.approx(v, abs=1e-12)


def test_step_wraps_on_track():
    state = step_vehicle(VehicleLongState(s=7.58, v=0.5), 0.0, 0.1, track_length=7.6)
    assert state.s == pytest.approx(0.03)


def test_step_rejects_nan_command():
    with pytest.raises(SimulationFault):
        step_vehicle(VehicleLongState(), math.nan, 0.1)


def test_pair_state():
    x = platoon_state(VehicleLongState(s=1.0, v=0.4), VehicleLongState(s=0.9, v=0.3), 7.6)
    np.testing.assert_allclose(x, [0.1, 0.4, 0.3])


def test_gap_wraparound():
    assert forward_gap(0.05, 7.55, 7.6) == pytest.approx(0.1)
    assert forward_gap(2.0, 2.0, 7.6) == 0.0


def test_gap_range():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        gap = forward_gap(rng.uniform(-20, 20), rng.uniform(-20, 20), 7.6)
        assert 0.0 <= gap < 7.6
