"""
dynamics.py

Longitudinal platoon model of a leader/follower pair and per-vehicle
integration along the track.

Pair state is x = [p1 - p2, v1, v2]; inputs are the two accelerations
u = [a1, a2]. The continuous model is discretized with a zero-order hold.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from errors import ConfigError, SimulationFault

A_PLATOON = np.array([
    [0.0, 1.0, -1.0],
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0],
])
B_PLATOON = np.array([
    [0.0, 0.0],
    [1.0, 0.0],
    [0.0, 1.0],
])


def discretize(A, B, T):
    """
    Exact zero-order-hold discretization.

    Uses the block matrix M = [[A, B], [0, 0]]: exp(M T) holds Ad and Bd.
    When M is nilpotent (the platoon model is) the exponential series is
    summed in closed form, otherwise scipy's expm is used.

    Args:
        A: n x n continuous state matrix.
        B: n x m continuous input matrix.
        T: Sample time in seconds, > 0.

    Returns:
        (Ad, Bd) as numpy arrays.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if not T > 0:
        raise ConfigError(f"sample time must be > 0, got {T}")
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B

    # Sum the series while powers stay nonzero; a zero power ends it exactly.
    E = np.eye(n + m)
    term = np.eye(n + m)
    for k in range(1, n + m + 1):
        term = term @ M
        if not term.any():
            break
        E = E + term * (T ** k / math.factorial(k))
    else:
        E = expm(M * T)
    return E[:n, :n].copy(), E[:n, n:].copy()


@dataclass(frozen=True, eq=False)
class PlatoonModel:
    A: np.ndarray
    B: np.ndarray
    Ad: np.ndarray
    Bd: np.ndarray
    sample_time_s: float

    @property
    def input_dim(self):
        return self.Bd.shape[1]


def platoon_model(sample_time_s):
    """Leader/follower pair model discretized at sample_time_s."""
    Ad, Bd = discretize(A_PLATOON, B_PLATOON, sample_time_s)
    return PlatoonModel(A_PLATOON.copy(), B_PLATOON.copy(), Ad, Bd, sample_time_s)


@dataclass(frozen=True)
class VehicleLongState:
    s: float = 0.0
    v: float = 0.0
    a_cmd: float = 0.0


def step_vehicle(state, a, T, track_length=None, v_max=1.0):
    """
    Advance one vehicle by one tick with constant commanded acceleration.

    Speed saturates in [0, v_max]; the distance covered is integrated
    exactly through the saturation instant.

    Args:
        state: VehicleLongState before the tick.
        a: Commanded acceleration (m/s^2).
        T: Tick length (s).
        track_length: Wrap s modulo this when given.
        v_max: Speed limit (m/s).
    """
    if not math.isfinite(a):
        raise SimulationFault(f"non-finite acceleration command {a!r}")
    if not T > 0:
        raise ConfigError(f"sample time must be > 0, got {T}")
    v0 = min(max(state.v, 0.0), v_max)
    v_free = v0 + a * T
    if v_free < 0.0:
        # Decelerating to rest inside the tick.
        t_stop = v0 / -a
        distance = v0 * t_stop + 0.5 * a * t_stop * t_stop
        v1 = 0.0
    elif v_free > v_max:
        t_sat = (v_max - v0) / a
        distance = v0 * t_sat + 0.5 * a * t_sat * t_sat + v_max * (T - t_sat)
        v1 = v_max
    else:
        distance = v0 * T + 0.5 * a * T * T
        v1 = v_free
    s1 = state.s + distance
    if track_length is not None:
        s1 = s1 % track_length
    return replace(state, s=s1, v=v1, a_cmd=a)


def forward_gap(s_leader, s_follower, track_length):
    """Along-track distance from follower forward to leader, in [0, track_length)."""
    gap = (s_leader - s_follower) % track_length
    if gap >= track_length:
        gap = 0.0
    return gap


def platoon_state(leader, follower, track_length):
    """Pair state [gap, v_leader, v_follower] of two vehicles on the same track."""
    return np.array([forward_gap(leader.s, follower.s, track_length), leader.v, follower.v])
