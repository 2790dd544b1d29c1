"""
mpc.py

Finite-horizon constrained LQR (model predictive control) for the pair
model, and the actuator-side buffer that replays the computed command
sequence while downlink packets are lost.

The horizon problem is condensed onto the inputs U = [u_0 .. u_{N-1}]:

    J(U) = 1/2 U' H U + g' U + const,   u_min <= u_k <= u_max

and solved by gradient projection with step 1/L, L the largest eigenvalue
of H. Each projected step is followed by a Newton step on the free
variables, accepted only when it lowers J, so J never increases.
"""

from dataclasses import dataclass, field

import numpy as np

from control import _matrix, check_weights, solve_dare
from errors import ConfigError
from sim_logger import global_log

HOLD_LAST = "hold_last"
ZERO = "zero"
EXHAUSTED_POLICIES = (HOLD_LAST, ZERO)


@dataclass(frozen=True)
class MpcConfig:
    horizon_steps: int = 10
    Q: tuple = ((1000.0, 0.0, 0.0), (0.0, 1000.0, 0.0), (0.0, 0.0, 1000.0))
    R: tuple = ((1.0, 0.0), (0.0, 1.0))
    # None uses the infinite-horizon Riccati solution.
    terminal_P: tuple = None
    u_min: tuple = (-1.0, -1.0)
    u_max: tuple = (1.0, 1.0)
    qp_tolerance: float = 1e-8
    qp_max_iters: int = 500
    power_iterations: int = 100
    exhausted_policy: str = HOLD_LAST

    def __post_init__(self):
        if int(self.horizon_steps) < 1:
            raise ConfigError(f"mpc.horizon_steps must be >= 1, got {self.horizon_steps}")
        Q = np.array(self.Q, dtype=float)
        R = np.array(self.R, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ConfigError("mpc.Q and mpc.R must be square matrices")
        check_weights(Q, R)
        if self.terminal_P is not None:
            P = _matrix(self.terminal_P, Q.shape, "mpc.terminal_P")
            check_weights(P, np.eye(1))
        u_min = np.array(self.u_min, dtype=float)
        u_max = np.array(self.u_max, dtype=float)
        if u_min.shape != (R.shape[0],) or u_max.shape != (R.shape[0],):
            raise ConfigError("mpc.u_min and mpc.u_max need one bound per input")
        if not np.all(u_min < u_max):
            raise ConfigError("mpc.u_min must be below mpc.u_max componentwise")
        if not (self.qp_tolerance > 0 and int(self.qp_max_iters) > 0 and int(self.power_iterations) > 0):
            raise ConfigError("mpc tolerances and iteration budgets must be positive")
        if self.exhausted_policy not in EXHAUSTED_POLICIES:
            raise ConfigError(f"mpc.exhausted_policy must be one of {EXHAUSTED_POLICIES}")


@dataclass(frozen=True, eq=False)
class CommandSequence:
    created_at_tick: int
    commands: tuple

    def __len__(self):
        return len(self.commands)


@dataclass(frozen=True)
class QpResult:
    U: np.ndarray
    iterations: int
    residual: float
    inexact: bool
    costs: tuple = field(default=(), repr=False)


def largest_eigenvalue(H, iterations=100):
    """Largest eigenvalue of the symmetric PSD matrix H by power iteration."""
    v = np.ones(H.shape[0]) / np.sqrt(H.shape[0])
    value = 0.0
    for _ in range(iterations):
        w = H @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        value = float(v @ H @ v)
    # Power iteration approaches from below; pad so 1/L stays a safe step.
    return value * 1.01


def solve_box_qp(H, g, lower, upper, L, tolerance=1e-8, max_iters=500, track_cost=False):
    """
    Minimize 1/2 U'HU + g'U over lower <= U <= upper.

    Returns:
        QpResult; inexact is set when max_iters ran out before the
        projected-gradient norm reached tolerance.
    """
    def cost(U):
        return 0.5 * U @ H @ U + g @ U

    def projected_gradient_norm(U, grad):
        return float(np.linalg.norm(U - np.clip(U - grad, lower, upper)))

    scale = max(1.0, float(np.linalg.norm(g)))
    # Start from the clipped unconstrained minimizer.
    U = np.clip(np.linalg.solve(H, -g), lower, upper)
    J = cost(U)
    costs = [J] if track_cost else None
    grad = H @ U + g
    residual = projected_gradient_norm(U, grad)
    iterations = 0
    while residual > tolerance * scale and iterations < max_iters:
        iterations += 1
        U = np.clip(U - grad / L, lower, upper)
        J = cost(U)
        grad = H @ U + g

        # Newton step on the variables not pinned at a bound.
        pinned = ((U <= lower) & (grad > 0)) | ((U >= upper) & (grad < 0))
        free = ~pinned
        if free.any():
            step = np.zeros_like(U)
            step[free] = np.linalg.solve(H[np.ix_(free, free)], -grad[free])
            t = 1.0
            for _ in range(30):
                candidate = np.clip(U + t * step, lower, upper)
                candidate_cost = cost(candidate)
                if candidate_cost <= J:
                    U, J = candidate, candidate_cost
                    grad = H @ U + g
                    break
                t *= 0.5
        if track_cost:
            costs.append(J)
        residual = projected_gradient_norm(U, grad)
    inexact = residual > tolerance * scale
    return QpResult(U=U, iterations=iterations, residual=residual, inexact=inexact,
                    costs=tuple(costs) if track_cost else ())


class MpcController:
    """
    Condensed horizon problem for one discrete model and configuration.

    The prediction matrices, Hessian and step size depend only on the model
    and weights, so they are built once and reused every tick.
    """

    def __init__(self, model, cfg):
        self.cfg = cfg
        Ad = np.atleast_2d(np.asarray(model.Ad, dtype=float))
        Bd = np.asarray(model.Bd, dtype=float).reshape(Ad.shape[0], -1)
        n, m = Bd.shape
        N = int(cfg.horizon_steps)
        Q = np.array(cfg.Q, dtype=float)
        R = np.array(cfg.R, dtype=float)
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ConfigError(f"mpc weights do not match a model with {n} states and {m} inputs")
        if cfg.terminal_P is None:
            P = solve_dare(Ad, Bd, Q, R).P
        else:
            P = np.array(cfg.terminal_P, dtype=float)
        self.n, self.m, self.N = n, m, N
        self.terminal_P = P

        # X = [x_1 .. x_N] = Phi x_0 + Gamma U
        Phi = np.zeros((N * n, n))
        Gamma = np.zeros((N * n, N * m))
        power = np.eye(n)
        for k in range(N):
            power = Ad @ power
            Phi[k * n:(k + 1) * n] = power
            for j in range(k + 1):
                Gamma[k * n:(k + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(Ad, k - j) @ Bd
        Qbar = np.zeros((N * n, N * n))
        for k in range(N):
            Qbar[k * n:(k + 1) * n, k * n:(k + 1) * n] = P if k == N - 1 else Q
        Rbar = np.kron(np.eye(N), R)
        self.Phi = Phi
        self.Gamma = Gamma
        self.Qbar = Qbar
        self.H = 2.0 * (Gamma.T @ Qbar @ Gamma + Rbar)
        self.H = 0.5 * (self.H + self.H.T)
        self.L = largest_eigenvalue(self.H, int(cfg.power_iterations))
        self.lower = np.tile(np.array(cfg.u_min, dtype=float), N)
        self.upper = np.tile(np.array(cfg.u_max, dtype=float), N)

    def linear_term(self, x0, x_des):
        x0 = np.asarray(x0, dtype=float)
        X_des = np.tile(np.asarray(x_des, dtype=float), self.N)
        return 2.0 * self.Gamma.T @ self.Qbar @ (self.Phi @ x0 - X_des)

    def solve_qp(self, x0, x_des, track_cost=False):
        g = self.linear_term(x0, x_des)
        return solve_box_qp(self.H, g, self.lower, self.upper, self.L,
                            self.cfg.qp_tolerance, int(self.cfg.qp_max_iters), track_cost)

    def solve(self, x0, x_des, tick=0):
        """
        Command sequence for the horizon starting at x0.

        Returns:
            (CommandSequence, QpResult)
        """
        result = self.solve_qp(x0, x_des)
        if result.inexact:
            global_log(
                f"[MPC] tick {tick}: QP budget exhausted after {result.iterations} iterations, "
                f"residual {result.residual:.3e}"
            )
        U = result.U.reshape(self.N, self.m)
        return CommandSequence(tick, tuple(U[k].copy() for k in range(self.N))), result


def mpc_solve(x0, x_des, model, cfg, tick=0):
    """One-shot MPC solve; builds the condensed problem for model and cfg."""
    sequence, _ = MpcController(model, cfg).solve(x0, x_des, tick)
    return sequence


class ActuatorBuffer:
    """
    Receiver-side store of the latest command sequence.

    Each actuator tick pops the next command. Once the sequence is used up
    the output follows the exhausted policy: hold the last command or zero.
    """

    def __init__(self, input_dim=1, exhausted_policy=HOLD_LAST):
        if exhausted_policy not in EXHAUSTED_POLICIES:
            raise ConfigError(f"exhausted policy must be one of {EXHAUSTED_POLICIES}")
        self.input_dim = input_dim
        self.exhausted_policy = exhausted_policy
        self.sequence = None
        self.cursor = 0
        self.stale_count = 0
        self.exhaustion_count = 0
        self.last_output = np.zeros(input_dim)

    @property
    def exhausted(self):
        return self.sequence is not None and self.cursor >= len(self.sequence)

    def push(self, sequence):
        """
        Store sequence if it is newer than the current one.

        Returns:
            True when stored, False when discarded as stale.
        """
        if self.sequence is not None and sequence.created_at_tick <= self.sequence.created_at_tick:
            self.stale_count += 1
            return False
        self.sequence = sequence
        self.cursor = 0
        return True

    def pop(self):
        """Command for this actuator tick."""
        if self.sequence is not None and self.cursor < len(self.sequence):
            command = np.array(self.sequence.commands[self.cursor], dtype=float).reshape(self.input_dim)
            self.cursor += 1
        elif self.sequence is None:
            # Nothing received yet.
            command = np.zeros(self.input_dim)
        else:
            self.exhaustion_count += 1
            if self.exhausted_policy == HOLD_LAST:
                command = np.array(self.sequence.commands[-1], dtype=float).reshape(self.input_dim)
            else:
                command = np.zeros(self.input_dim)
        self.last_output = command
        return command
