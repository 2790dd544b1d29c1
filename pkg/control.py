"""
control.py

LQR gain synthesis for the leader/follower pair, the tracking law built on
it, and the four-zone train-vehicle rule engine:

  gap > 1.0 m            -> the vehicle acts as a leader at 0.9 of full speed
  0.10 m < gap <= 1.0 m  -> LQR (or MPC) keeps a 10 cm distance
  0.06 m < gap <= 0.10 m -> speed is a linear function of the gap
  gap <= 0.06 m          -> the vehicle stops

Commands follow the stabilizing convention u = -F (x - x_des).
"""

import enum
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, InputError, SynthesisError
from sim_logger import global_log


def _matrix(value, shape, name):
    matrix = np.array(value, dtype=float)
    if matrix.shape != shape:
        raise ConfigError(f"{name} must be {shape[0]}x{shape[1]}, got shape {matrix.shape}")
    return matrix


def check_weights(Q, R):
    """Raise ConfigError unless Q is symmetric PSD and R symmetric PD."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() < -1e-12:
        raise ConfigError("Q must be symmetric positive semidefinite")
    if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0.0:
        raise ConfigError("R must be symmetric positive definite")


@dataclass(frozen=True)
class LqrConfig:
    Q: tuple = ((1000.0, 0.0, 0.0), (0.0, 1000.0, 0.0), (0.0, 0.0, 1000.0))
    R: tuple = ((1.0, 0.0), (0.0, 1.0))
    desired_gap_m: float = 0.10
    # None tracks the estimated leader speed.
    desired_speed_mps: float = None
    a_max_mps2: float = 1.0
    apply_leader_input: bool = False

    def __post_init__(self):
        check_weights(_matrix(self.Q, (3, 3), "lqr.Q"), _matrix(self.R, (2, 2), "lqr.R"))
        if not self.desired_gap_m > 0:
            raise ConfigError(f"lqr.desired_gap_m must be > 0, got {self.desired_gap_m}")
        if not self.a_max_mps2 > 0:
            raise ConfigError(f"lqr.a_max_mps2 must be > 0, got {self.a_max_mps2}")

    @property
    def Q_matrix(self):
        return np.array(self.Q, dtype=float)

    @property
    def R_matrix(self):
        return np.array(self.R, dtype=float)


@dataclass(frozen=True, eq=False)
class LqrGain:
    F: np.ndarray
    P: np.ndarray
    iterations: int = 0

    def closed_loop_radius(self, Ad, Bd):
        """Spectral radius of Ad - Bd F."""
        return float(np.max(np.abs(np.linalg.eigvals(np.asarray(Ad) - np.asarray(Bd) @ self.F))))


def riccati_map(P, Ad, Bd, Q, R):
    """One step of the discrete Riccati recursion P -> f(P)."""
    BtP = Bd.T @ P
    gain = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
    return Q + Ad.T @ P @ Ad - Ad.T @ P @ Bd @ gain


def dare_residual(P, Ad, Bd, Q, R):
    """Frobenius norm of P - f(P)."""
    return float(np.linalg.norm(P - riccati_map(P, Ad, Bd, Q, R), "fro"))


def solve_dare(Ad, Bd, Q, R, tol=1e-12, max_iter=10000):
    """
    Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates P <- f(P) from P = Q until the relative change drops below tol,
    then keeps iterating while the change still shrinks so the result sits at
    the floating-point fixed point.

    Args:
        Ad, Bd: Discrete model.
        Q: State weight (PSD).
        R: Input weight (PD).
        tol: Relative convergence tolerance.
        max_iter: Iteration budget.

    Returns:
        LqrGain with F = (R + Bd'P Bd)^-1 Bd'P Ad.
    """
    Ad = np.atleast_2d(np.asarray(Ad, dtype=float))
    Bd = np.asarray(Bd, dtype=float).reshape(Ad.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise InputError("R must be positive definite") from exc

    P = Q.copy()
    converged = False
    previous_change = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        P_next = riccati_map(P, Ad, Bd, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise SynthesisError("Riccati iteration diverged (non-finite P)")
        change = float(np.linalg.norm(P_next - P, "fro"))
        scale = max(1.0, float(np.linalg.norm(P_next, "fro")))
        P = P_next
        if converged and change >= previous_change:
            break
        if change <= tol * scale:
            converged = True
            if change == 0.0:
                break
        previous_change = change
    if not converged:
        raise SynthesisError(f"Riccati iteration did not converge in {max_iter} iterations")
    BtP = Bd.T @ P
    F = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
    return LqrGain(F=F, P=P, iterations=iterations)


def lqr_command(gain, x, x_des, a_max=1.0):
    """u = -F (x - x_des), clamped componentwise to +-a_max."""
    error = np.asarray(x, dtype=float) - np.asarray(x_des, dtype=float)
    return np.clip(-gain.F @ error, -a_max, a_max)


def desired_state(cfg, leader_speed):
    """x_des = [desired gap, v_des, v_des]; v_des follows the leader unless fixed."""
    v_des = leader_speed if cfg.desired_speed_mps is None else cfg.desired_speed_mps
    return np.array([cfg.desired_gap_m, v_des, v_des])


def lqr_boundary_speed(gain, x, x_des, boundary_gap, T, a_max=1.0, v_max=1.0):
    """
    Follower speed the LQR zone would command at gap = boundary_gap.

    Anchors the linear zone so the speed is continuous at its upper edge.
    """
    x_boundary = np.array(x, dtype=float)
    x_boundary[0] = boundary_gap
    u = lqr_command(gain, x_boundary, x_des, a_max)
    return float(min(max(x_boundary[2] + u[1] * T, 0.0), v_max))


@dataclass(frozen=True)
class ScenarioConfig:
    leader_threshold_m: float = 1.0
    lqr_zone_min_m: float = 0.10
    stop_zone_m: float = 0.06
    leader_speed_fraction: float = 0.9
    # Margins a follower already in the LQR zone is held by below and above it.
    zone_hysteresis_m: float = 0.02
    leader_hysteresis_m: float = 0.5

    def __post_init__(self):
        if not 0 <= self.stop_zone_m < self.lqr_zone_min_m < self.leader_threshold_m:
            raise ConfigError("scenario zones must satisfy stop_zone_m < lqr_zone_min_m < leader_threshold_m")
        if not 0 <= self.zone_hysteresis_m < self.lqr_zone_min_m - self.stop_zone_m:
            raise ConfigError("scenario.zone_hysteresis_m must be in [0, lqr_zone_min_m - stop_zone_m)")
        if not self.leader_hysteresis_m >= 0:
            raise ConfigError(f"scenario.leader_hysteresis_m must be >= 0, got {self.leader_hysteresis_m}")
        if not 0 < self.leader_speed_fraction <= 1:
            raise ConfigError(f"scenario.leader_speed_fraction must be in (0, 1], got {self.leader_speed_fraction}")


class Zone(enum.Enum):
    LEADER = "leader"
    LQR = "lqr"
    LINEAR = "linear"
    STOP = "stop"


@dataclass(frozen=True)
class SpeedDecision:
    zone: Zone
    # Speed set point; None in the LQR zone, where the optimal controller decides.
    v: float = None


def scenario_speed(gap_m, cfg, full_speed_mps, v_boundary=0.0, previous=None):
    """
    Pick the zone and speed set point for a vehicle given its gap.

    A vehicle whose previous zone was LQR keeps it while the gap stays within
    zone_hysteresis_m below and leader_hysteresis_m above the LQR zone, so a
    gap regulated to the lower edge does not chatter between zones.

    Args:
        gap_m: Gap to the vehicle ahead (m), >= 0; math.inf for the fleet leader.
        cfg: ScenarioConfig.
        full_speed_mps: Full speed of the vehicle.
        v_boundary: Speed the LQR zone commands at its lower edge.
        previous: Zone of the previous decision for this vehicle, or None.
    """
    if not gap_m >= 0:
        raise InputError(f"gap must be >= 0, got {gap_m}")
    if previous is Zone.LQR and (cfg.lqr_zone_min_m - cfg.zone_hysteresis_m < gap_m
                                 <= cfg.leader_threshold_m + cfg.leader_hysteresis_m):
        return SpeedDecision(Zone.LQR)
    if gap_m > cfg.leader_threshold_m:
        return SpeedDecision(Zone.LEADER, cfg.leader_speed_fraction * full_speed_mps)
    if gap_m > cfg.lqr_zone_min_m:
        return SpeedDecision(Zone.LQR)
    if gap_m > cfg.stop_zone_m:
        fraction = (gap_m - cfg.stop_zone_m) / (cfg.lqr_zone_min_m - cfg.stop_zone_m)
        return SpeedDecision(Zone.LINEAR, max(v_boundary, 0.0) * fraction)
    return SpeedDecision(Zone.STOP, 0.0)


def speed_tracking_sequence(v0, v_ref, T, steps, a_max=1.0):
    """
    Accelerations that drive speed v0 to v_ref as fast as a_max allows.

    a_k = clamp((v_ref - v_k) / T, +-a_max), v_{k+1} = v_k + a_k T.
    """
    commands = []
    v = v0
    for _ in range(steps):
        a = min(max((v_ref - v) / T, -a_max), a_max)
        commands.append(a)
        v = v + a * T
    return commands


def design_gain(model, cfg):
    """Synthesize the pair gain for model with the weights of cfg."""
    gain = solve_dare(model.Ad, model.Bd, cfg.Q_matrix, cfg.R_matrix)
    global_log(
        f"[LQR] gain synthesized in {gain.iterations} iterations, "
        f"closed-loop radius {gain.closed_loop_radius(model.Ad, model.Bd):.4f}"
    )
    return gain
