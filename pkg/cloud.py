"""
cloud.py

The remote controller of the platoon. Sensor reports arrive over the uplinks,
one Kalman filter per vehicle is kept at the sample tick of those reports, and
each tick a command sequence is computed for every vehicle whose filter is
ready: the leader after its first speed measurement, a follower after its
first gap measurement.

Vehicle 0 leads the fleet and has a scalar speed filter. Every follower i has
a pair filter on [gap to i-1, v_{i-1}, v_i]. Before a command is computed the
estimate is predicted through the uplink and downlink delays with the
commands already issued, so it refers to the tick the command will be applied.
"""

import math
from dataclasses import dataclass

import numpy as np

from control import (
    Zone,
    desired_state,
    design_gain,
    lqr_boundary_speed,
    lqr_command,
    scenario_speed,
    speed_tracking_sequence,
)
from dynamics import forward_gap
from errors import ConfigError
from estimation import LOST, kf_init, kf_predict, kf_update, platoon_kf_model, speed_kf_model
from mpc import CommandSequence, MpcController
from sim_logger import global_log
from world import track_project

LQR_DIRECT = "lqr_direct"
MPC_BUFFERED = "mpc_buffered"
CONTROLLER_MODES = (LQR_DIRECT, MPC_BUFFERED)

CRUISE = "cruise"
SQUARE_WAVE = "square_wave"
LEADER_PROFILES = (CRUISE, SQUARE_WAVE)


@dataclass(frozen=True)
class SensorReport:
    """Uplink payload of one vehicle for one sample tick."""

    vehicle: int
    speed_mps: float
    # None for the fleet leader, on ultrasonic dropout and beyond range.
    gap_m: float = None
    ips_xy: tuple = None
    ips_speed_mps: float = None


@dataclass(frozen=True)
class Decision:
    vehicle: int
    zone: Zone
    sequence: CommandSequence
    x_hat: tuple
    mpc_inexact: bool = False


def square_wave_accel(tick, T, amplitude, period_s):
    """+amplitude for the first half of every period, -amplitude for the second."""
    phase = (tick * T) % period_s
    return amplitude if phase < 0.5 * period_s else -amplitude


class CloudController:
    """
    Args:
        config: Run configuration (sim, vehicle, leader, scenario, lqr, mpc,
            controller, estimation and network sections).
        model: PlatoonModel at the run's sample time.
        track: Track the fleet drives on.
    """

    def __init__(self, config, model, track):
        self.config = config
        self.model = model
        self.track = track
        self.T = config.sim.sample_time_s
        self.vehicle_count = int(config.sim.vehicle_count)
        self.d_up = int(config.network.uplink.delay_ticks)
        self.d_down = int(config.network.downlink.delay_ticks)
        self.mode = config.controller.mode
        if self.mode not in CONTROLLER_MODES:
            raise ConfigError(f"controller.mode must be one of {CONTROLLER_MODES}, got {self.mode!r}")
        self.ips_feedback = bool(config.controller.ips_feedback)

        self.gain = design_gain(model, config.lqr)
        self.mpc = MpcController(model, config.mpc) if self.mode == MPC_BUFFERED else None
        if self.mode == MPC_BUFFERED and config.controller.buffer_enabled:
            self.sequence_length = int(config.mpc.horizon_steps)
        else:
            self.sequence_length = 1

        est = config.estimation
        self.leader_model = speed_kf_model(self.T, est, self.ips_feedback)
        self.pair_model = platoon_kf_model(model, est, self.ips_feedback)
        self.filters = [None] * self.vehicle_count
        self.ready = [False] * self.vehicle_count
        # Followers start inside a platoon, so their zone memory starts in LQR.
        self.zones = [Zone.LEADER] + [Zone.LQR] * (self.vehicle_count - 1)
        self.issued = [dict() for _ in range(self.vehicle_count)]
        self.pending = {}
        self.late_packets = 0
        self.mpc_inexact = 0

    def receive(self, packets, now_tick):
        """Queue delivered uplink packets by their sample tick."""
        for packet in packets:
            if packet.send_tick < now_tick - self.d_up:
                self.late_packets += 1
                continue
            report = packet.payload
            self.pending.setdefault(packet.send_tick, {})[report.vehicle] = report

    def issued_at(self, vehicle, tick):
        return self.issued[vehicle].get(tick, 0.0)

    def _inputs(self, vehicle, tick):
        if vehicle == 0:
            return np.array([self.issued_at(0, tick)])
        return np.array([self.issued_at(vehicle - 1, tick), self.issued_at(vehicle, tick)])

    def _gap_from_ips(self, ahead, own):
        if ahead is None or own is None or ahead.ips_xy is None or own.ips_xy is None:
            return None
        s_ahead = track_project(self.track, *ahead.ips_xy)
        s_own = track_project(self.track, *own.ips_xy)
        return forward_gap(s_ahead, s_own, self.track.total_length)

    def _speed(self, report):
        if report is None:
            return None
        return report.ips_speed_mps if self.ips_feedback else report.speed_mps

    def _measurement(self, vehicle, reports):
        """(rows, values) of the measurement vector that arrived for vehicle."""
        own = reports.get(vehicle)
        if vehicle == 0:
            speed = self._speed(own)
            return ([0], [speed]) if speed is not None else ([], [])
        ahead = reports.get(vehicle - 1)
        if self.ips_feedback:
            gap = self._gap_from_ips(ahead, own)
        else:
            gap = own.gap_m if own is not None else None
        candidates = (gap, self._speed(ahead), self._speed(own))
        rows = [i for i, value in enumerate(candidates) if value is not None]
        return rows, [candidates[i] for i in rows]

    def _advance_filter(self, vehicle, sample_tick, reports):
        model = self.leader_model if vehicle == 0 else self.pair_model
        state = self.filters[vehicle]
        if state is None:
            n = model.Ad.shape[0]
            state = kf_init(np.zeros(n), self.config.estimation.initial_variance * np.eye(n))
        else:
            state = kf_predict(state, model, self._inputs(vehicle, sample_tick - 1))
        rows, values = self._measurement(vehicle, reports)
        if rows:
            state = kf_update(state, model.subset(rows), np.array(values))
            if vehicle == 0 or 0 in rows:
                self.ready[vehicle] = True
        else:
            state = kf_update(state, model, LOST)
        self.filters[vehicle] = state

    def predicted_state(self, vehicle, sample_tick, apply_tick):
        """Filter estimate carried from sample_tick to apply_tick with the issued commands."""
        model = self.leader_model if vehicle == 0 else self.pair_model
        x = self.filters[vehicle].x_hat.copy()
        for tick in range(sample_tick, apply_tick):
            x = model.Ad @ x + model.Bd @ self._inputs(vehicle, tick)
        return x

    def _leader_commands(self, x, apply_tick):
        leader = self.config.leader
        a_max = self.config.vehicle.a_max_mps2
        if leader.profile == SQUARE_WAVE:
            return [square_wave_accel(apply_tick + m, self.T, leader.amplitude_mps2, leader.period_s)
                    for m in range(self.sequence_length)], Zone.LEADER
        decision = scenario_speed(math.inf, self.config.scenario, self.config.sim.full_speed_mps)
        return speed_tracking_sequence(float(x[0]), decision.v, self.T, self.sequence_length, a_max), decision.zone

    def _follower_commands(self, vehicle, x, now_tick):
        """Returns (commands, zone, leader acceleration suggested by the controller or None, inexact)."""
        cfg = self.config
        a_max = cfg.vehicle.a_max_mps2
        x_des = desired_state(cfg.lqr, float(x[1]))
        v_boundary = lqr_boundary_speed(self.gain, x, x_des, cfg.scenario.lqr_zone_min_m, self.T,
                                        cfg.lqr.a_max_mps2, cfg.vehicle.v_max_mps)
        decision = scenario_speed(max(float(x[0]), 0.0), cfg.scenario, cfg.sim.full_speed_mps, v_boundary,
                                  previous=self.zones[vehicle])
        self.zones[vehicle] = decision.zone
        if decision.zone != Zone.LQR:
            commands = speed_tracking_sequence(float(x[2]), decision.v, self.T, self.sequence_length, a_max)
            return commands, decision.zone, None, False
        if self.mpc is None:
            u = lqr_command(self.gain, x, x_des, cfg.lqr.a_max_mps2)
            return [float(u[1])], decision.zone, float(u[0]), False
        sequence, result = self.mpc.solve(x, x_des, now_tick)
        if result.inexact:
            self.mpc_inexact += 1
        commands = [float(u[1]) for u in sequence.commands[:self.sequence_length]]
        return commands, decision.zone, float(sequence.commands[0][0]), result.inexact

    def step(self, now_tick):
        """
        Run the filters and compute this tick's command sequences.

        Returns:
            List of Decision, one per vehicle that has an estimate, by vehicle index.
        """
        sample_tick = now_tick - self.d_up
        if sample_tick < 0:
            return []
        reports = self.pending.pop(sample_tick, {})
        for vehicle in range(self.vehicle_count):
            self._advance_filter(vehicle, sample_tick, reports)

        apply_tick = now_tick + self.d_down
        planned = {}
        for vehicle in range(self.vehicle_count):
            if not self.ready[vehicle]:
                continue
            x = self.predicted_state(vehicle, sample_tick, apply_tick)
            if vehicle == 0:
                commands, zone = self._leader_commands(x, apply_tick)
                leader_input, inexact = None, False
            else:
                commands, zone, leader_input, inexact = self._follower_commands(vehicle, x, now_tick)
            planned[vehicle] = [commands, zone, x, leader_input, inexact]

        if self.config.lqr.apply_leader_input:
            a_max = self.config.vehicle.a_max_mps2
            for vehicle, (_, _, _, leader_input, _) in planned.items():
                if leader_input is not None and vehicle - 1 in planned:
                    commands = planned[vehicle - 1][0]
                    commands[0] = min(max(commands[0] + leader_input, -a_max), a_max)

        decisions = []
        for vehicle in sorted(planned):
            commands, zone, x, _, inexact = planned[vehicle]
            for m, command in enumerate(commands):
                self.issued[vehicle][apply_tick + m] = command
            for tick in [k for k in self.issued[vehicle] if k < sample_tick - 1]:
                del self.issued[vehicle][tick]
            sequence = CommandSequence(now_tick, tuple(np.array([c]) for c in commands))
            decisions.append(Decision(vehicle, zone, sequence, tuple(float(v) for v in x), inexact))
        return decisions

    def log_status(self):
        global_log(f"[SIM] controller: {self.late_packets} late packets, {self.mpc_inexact} inexact MPC solves")
