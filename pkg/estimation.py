"""
estimation.py

Linear Kalman filter with intermittent measurements. When a sensing packet
is lost the update step is skipped and the filter keeps the prediction.

Two instantiations are provided: the leader/follower pair state
[gap, v_leader, v_follower] measured by ultrasonic ranging and wheel
encoders, and a constant-velocity planar model that smooths IPS positions
into a pose [x, y, omega].
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from errors import ConfigError, EstimationFault
from world import Pose

# Marker for a measurement that never arrived.
LOST = None

# Innovation covariances worse conditioned than this are treated as singular.
MAX_INNOVATION_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class KfModel:
    Ad: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    Qn: np.ndarray
    Rn: np.ndarray

    def __post_init__(self):
        n = self.Ad.shape[0]
        if self.Ad.shape != (n, n) or self.Bd.shape[0] != n or self.C.shape[1] != n:
            raise ConfigError("Kalman model dimensions are inconsistent")
        p = self.C.shape[0]
        if self.Qn.shape != (n, n) or self.Rn.shape != (p, p):
            raise ConfigError("Kalman noise covariance dimensions are inconsistent")

    def subset(self, rows):
        """Model that measures only the given rows of y."""
        rows = list(rows)
        return replace(self, C=self.C[rows], Rn=self.Rn[np.ix_(rows, rows)])


@dataclass(frozen=True, eq=False)
class KfState:
    x_hat: np.ndarray
    P: np.ndarray
    step_count: int = 0
    dropped_count: int = 0


def kf_init(x0, P0):
    return KfState(np.array(x0, dtype=float), np.array(P0, dtype=float))


def kf_predict(state, model, u):
    """x <- Ad x + Bd u; P <- Ad P Ad' + Qn."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x_hat = model.Ad @ state.x_hat + model.Bd @ u
    P = model.Ad @ state.P @ model.Ad.T + model.Qn
    P = 0.5 * (P + P.T)
    return replace(state, x_hat=x_hat, P=P, step_count=state.step_count + 1)


def kf_update(state, model, y):
    """
    Measurement update; y = LOST skips it and only counts the drop.

    Raises:
        EstimationFault: the innovation covariance is numerically singular.
    """
    if y is LOST:
        return replace(state, dropped_count=state.dropped_count + 1)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    C = model.C
    innovation = y - C @ state.x_hat
    PCt = state.P @ C.T
    S = C @ PCt + model.Rn
    if not np.all(np.isfinite(S)) or not np.linalg.cond(S) <= MAX_INNOVATION_CONDITION:
        raise EstimationFault("innovation covariance is singular")
    K = np.linalg.solve(S, PCt.T).T
    x_hat = state.x_hat + K @ innovation
    P = (np.eye(state.P.shape[0]) - K @ C) @ state.P
    P = 0.5 * (P + P.T)
    return replace(state, x_hat=x_hat, P=P)


def normalized_innovation_squared(state, model, y):
    """Innovation' S^-1 innovation for the predicted state (filter consistency checks)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    innovation = y - model.C @ state.x_hat
    S = model.C @ state.P @ model.C.T + model.Rn
    return float(innovation @ np.linalg.solve(S, innovation))


@dataclass(frozen=True)
class EstimationConfig:
    platoon_process_noise: float = 1e-4
    ultrasonic_sigma_m: float = 0.005
    encoder_sigma_mps: float = 0.01
    initial_variance: float = 1.0
    pose_accel_sigma_mps2: float = 0.2
    pose_meas_sigma_m: float = 0.03
    # Noise of IPS-derived gap and speed when IPS output feeds the controller.
    ips_gap_sigma_m: float = 0.05
    ips_speed_sigma_mps: float = 0.05

    def __post_init__(self):
        for name in ("platoon_process_noise", "pose_accel_sigma_mps2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"estimation.{name} must be >= 0")
        for name in ("ultrasonic_sigma_m", "encoder_sigma_mps", "initial_variance",
                     "pose_meas_sigma_m", "ips_gap_sigma_m", "ips_speed_sigma_mps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"estimation.{name} must be > 0")


def platoon_kf_model(model, cfg, ips_feedback=False):
    """Pair filter: full state measured (gap, leader speed, follower speed)."""
    if ips_feedback:
        sigmas = (cfg.ips_gap_sigma_m, cfg.ips_speed_sigma_mps, cfg.ips_speed_sigma_mps)
    else:
        sigmas = (cfg.ultrasonic_sigma_m, cfg.encoder_sigma_mps, cfg.encoder_sigma_mps)
    return KfModel(
        Ad=model.Ad,
        Bd=model.Bd,
        C=np.eye(3),
        Qn=cfg.platoon_process_noise * np.eye(3),
        Rn=np.diag(np.square(sigmas)),
    )


def speed_kf_model(T, cfg, ips_feedback=False):
    """Single-vehicle speed filter v+ = v + T a, used for the fleet leader."""
    sigma = cfg.ips_speed_sigma_mps if ips_feedback else cfg.encoder_sigma_mps
    return KfModel(
        Ad=np.array([[1.0]]),
        Bd=np.array([[T]]),
        C=np.array([[1.0]]),
        Qn=np.array([[cfg.platoon_process_noise]]),
        Rn=np.array([[sigma * sigma]]),
    )


def pose_kf_model(T, accel_sigma=0.2, meas_sigma=0.03):
    """Constant-velocity model on (x, y, vx, vy) with white-acceleration process noise."""
    Ad = np.array([
        [1.0, 0.0, T, 0.0],
        [0.0, 1.0, 0.0, T],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    G = np.array([
        [0.5 * T * T, 0.0],
        [0.0, 0.5 * T * T],
        [T, 0.0],
        [0.0, T],
    ])
    return KfModel(
        Ad=Ad,
        Bd=np.zeros((4, 1)),
        C=np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]),
        Qn=accel_sigma ** 2 * (G @ G.T),
        Rn=meas_sigma ** 2 * np.eye(2),
    )


@dataclass(frozen=True, eq=False)
class PoseFilterState:
    kf: KfState
    omega: float = 0.0

    @property
    def speed(self):
        return float(math.hypot(self.kf.x_hat[2], self.kf.x_hat[3]))

    def pose(self):
        return Pose(float(self.kf.x_hat[0]), float(self.kf.x_hat[1]), self.omega)


def pose_filter_init(xy, model, omega=0.0, velocity_variance=1.0):
    """Start the pose filter at a first position fix, at rest."""
    P0 = np.diag([model.Rn[0, 0], model.Rn[1, 1], velocity_variance, velocity_variance])
    return PoseFilterState(kf_init([xy[0], xy[1], 0.0, 0.0], P0), omega)


# Below this speed estimate the heading is held.
MIN_HEADING_SPEED_MPS = 0.01


def pose_filter_step(prev, ips_xy, model):
    """
    One predict/update cycle of the pose filter.

    Args:
        prev: PoseFilterState, or None before the first fix.
        ips_xy: (x, y) from the IPS, or LOST.
        model: Constant-velocity KfModel from pose_kf_model.

    Returns:
        (PoseFilterState, Pose); the pose is None while no fix has arrived yet.
    """
    if prev is None:
        if ips_xy is LOST:
            return None, None
        state = pose_filter_init(ips_xy, model)
        return state, state.pose()
    kf = kf_predict(prev.kf, model, np.zeros(model.Bd.shape[1]))
    kf = kf_update(kf, model, LOST if ips_xy is LOST else np.asarray(ips_xy, dtype=float))
    vx, vy = kf.x_hat[2], kf.x_hat[3]
    omega = prev.omega
    if math.hypot(vx, vy) >= MIN_HEADING_SPEED_MPS:
        omega = math.atan2(vy, vx)
    state = PoseFilterState(kf, omega)
    return state, state.pose()
