"""
sim.py

Tick-synchronous simulation of the platoon testbed. Every tick runs the same
fixed sequence:

  1. sensors sample (ultrasonic gap, wheel encoder, accelerometer, beacon RSS)
  2. sensor reports are sent over each vehicle's uplink
  3. the cloud controller polls the uplinks, filters, and decides commands
  4. command sequences are sent over each vehicle's downlink
  5. actuators poll the downlink, refill their buffer and pop a command
  6. the plant advances and poses are recomputed on the track
  7. the IPS of every vehicle runs
  8. the trace events of the tick are written

The run is a pure function of its configuration: every random draw comes
from a per-consumer stream derived from sim.rng_seed.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cloud import CONTROLLER_MODES, CRUISE, LEADER_PROFILES, LQR_DIRECT, CloudController, SensorReport
from dynamics import VehicleLongState, forward_gap, platoon_model, step_vehicle
from errors import ConfigError, PlatoonSimError, SimulationFault
from ips import Arena, IpsTracker, error_cdf, rss_from_distance
from mpc import ActuatorBuffer
from netsim import build_link
from sim_logger import global_log
from world import (
    beacon_map_from_positions,
    default_beacon_map,
    default_rectangle_track,
    substream,
    track_pose,
)

SCHEMA_VERSION = 1

# Stream keys handed to substream(seed, key, vehicle).
SENSOR_STREAM = 1
IPS_STREAM = 2
UPLINK_STREAM = 3
DOWNLINK_STREAM = 4

# Distance floor for RSS synthesis when a vehicle sits on a beacon.
MIN_BEACON_DISTANCE_M = 1e-3


@dataclass(frozen=True)
class VehicleConfig:
    v_max_mps: float = 1.0
    a_max_mps2: float = 1.0
    initial_gap_m: float = 1.0
    initial_speed_mps: float = 0.0
    contact_threshold_m: float = 0.02

    def __post_init__(self):
        if not (self.v_max_mps > 0 and self.a_max_mps2 > 0):
            raise ConfigError("vehicle.v_max_mps and vehicle.a_max_mps2 must be > 0")
        if not self.initial_gap_m > 0:
            raise ConfigError(f"vehicle.initial_gap_m must be > 0, got {self.initial_gap_m}")
        if not 0 <= self.initial_speed_mps <= self.v_max_mps:
            raise ConfigError("vehicle.initial_speed_mps must be in [0, v_max_mps]")
        if self.contact_threshold_m < 0:
            raise ConfigError("vehicle.contact_threshold_m must be >= 0")


@dataclass(frozen=True)
class LeaderConfig:
    profile: str = CRUISE
    amplitude_mps2: float = 0.2
    period_s: float = 10.0

    def __post_init__(self):
        if self.profile not in LEADER_PROFILES:
            raise ConfigError(f"leader.profile must be one of {LEADER_PROFILES}, got {self.profile!r}")
        if not (self.amplitude_mps2 > 0 and self.period_s > 0):
            raise ConfigError("leader.amplitude_mps2 and leader.period_s must be > 0")


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = LQR_DIRECT
    buffer_enabled: bool = True
    # Feed IPS positions and pose-filter speeds to the controller instead of
    # the ultrasonic and encoder readings.
    ips_feedback: bool = False

    def __post_init__(self):
        if self.mode not in CONTROLLER_MODES:
            raise ConfigError(f"controller.mode must be one of {CONTROLLER_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class UltrasonicSensor:
    max_range_m: float = 2.0
    noise_sigma_m: float = 0.005
    dropout_prob: float = 0.01

    def __post_init__(self):
        if not self.max_range_m > 0:
            raise ConfigError(f"ultrasonic.max_range_m must be > 0, got {self.max_range_m}")
        if self.noise_sigma_m < 0:
            raise ConfigError("ultrasonic.noise_sigma_m must be >= 0")
        if not 0 <= self.dropout_prob <= 1:
            raise ConfigError("ultrasonic.dropout_prob must be in [0, 1]")

    def read(self, gap, rng):
        """Noisy gap reading, or None on dropout or beyond range. Always draws twice."""
        noise = rng.normal(0.0, self.noise_sigma_m) if self.noise_sigma_m > 0 else 0.0
        dropped = rng.random() < self.dropout_prob
        if dropped or gap > self.max_range_m:
            return None
        return max(gap + float(noise), 0.0)


@dataclass(frozen=True)
class EncoderConfig:
    noise_sigma_mps: float = 0.01

    def __post_init__(self):
        if self.noise_sigma_mps < 0:
            raise ConfigError("encoder.noise_sigma_mps must be >= 0")


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    vehicle: int
    kind: str
    payload: dict

    def to_json(self):
        record = {"schema_version": SCHEMA_VERSION, "tick": self.tick, "vehicle": self.vehicle, "kind": self.kind}
        record.update(self.payload)
        return json.dumps(record, separators=(",", ":"))


class TraceWriter:
    """Writes trace events as JSON lines to a text stream (or drops them)."""

    def __init__(self, stream=None):
        self.stream = stream
        self.count = 0
        self.last_tick = -1

    def write(self, events):
        for event in events:
            if event.tick < self.last_tick:
                raise SimulationFault("trace events out of tick order", event.tick)
            self.last_tick = event.tick
            self.count += 1
            if self.stream is not None:
                self.stream.write(event.to_json())
                self.stream.write("\n")


@dataclass
class VehicleSlot:
    """Runtime state of one vehicle of the fleet."""

    index: int
    state: VehicleLongState
    pose: object
    buffer: ActuatorBuffer
    sensor_rng: np.random.Generator
    ips_rng: np.random.Generator
    tracker: IpsTracker = None
    odometer_m: float = 0.0
    last_odometer_m: float = 0.0
    last_ips: object = None
    in_contact: bool = False


class Fleet:
    """Vehicles in platoon order; vehicle i follows vehicle i - 1."""

    def __init__(self, slots):
        self.slots = list(slots)

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, index):
        return self.slots[index]

    def gap(self, index, track_length):
        """Along-track gap of vehicle index to the one ahead; None for the leader."""
        if index == 0:
            return None
        return forward_gap(self.slots[index - 1].state.s, self.slots[index].state.s, track_length)


@dataclass(frozen=True)
class RunSummary:
    schema_version: int = SCHEMA_VERSION
    ticks: int = 0
    vehicle_count: int = 0
    gap_rms_m: tuple = ()
    final_gap_m: tuple = ()
    ips_error_p50_m: float = 0.0
    ips_error_p90_m: float = 0.0
    ips_error_max_m: float = 0.0
    ips_samples: int = 0
    links: dict = field(default_factory=dict)
    buffer_exhaustion_count: int = 0
    stale_sequence_count: int = 0
    late_packet_count: int = 0
    mpc_inexact_count: int = 0
    pf_divergence_count: int = 0
    safety_violation_count: int = 0

    def to_dict(self):
        data = asdict(self)
        data["gap_rms_m"] = list(self.gap_rms_m)
        data["final_gap_m"] = list(self.final_gap_m)
        return data

    def format_table(self):
        """Plain-text table of the summary for the terminal."""
        rows = [("ticks", self.ticks), ("vehicles", self.vehicle_count)]
        for i, (rms, final) in enumerate(zip(self.gap_rms_m, self.final_gap_m), start=1):
            rows.append((f"gap rms vehicle {i} (m)", f"{rms:.4f}"))
            rows.append((f"final gap vehicle {i} (m)", f"{final:.4f}"))
        rows += [
            ("ips error p50 (m)", f"{self.ips_error_p50_m:.4f}"),
            ("ips error p90 (m)", f"{self.ips_error_p90_m:.4f}"),
            ("ips error max (m)", f"{self.ips_error_max_m:.4f}"),
        ]
        for link_id, stats in sorted(self.links.items()):
            rows.append((f"{link_id} sent/dropped", f"{stats['sent']}/{stats['dropped']}"))
        rows += [
            ("buffer exhaustions", self.buffer_exhaustion_count),
            ("stale sequences", self.stale_sequence_count),
            ("late packets", self.late_packet_count),
            ("inexact mpc solves", self.mpc_inexact_count),
            ("pf divergences", self.pf_divergence_count),
            ("safety violations", self.safety_violation_count),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def beacon_map_for(config):
    if config.ips.beacons is None:
        return default_beacon_map(config.sim)
    return beacon_map_from_positions(config.ips.beacons, config.sim)


def replay_ips(config, records):
    """
    Feed a recorded RSS/IMU log through the IPS of vehicle 0.

    The tracker is built from the ips section and arena of config and draws
    from the same stream a live run would.

    Returns:
        List of TraceEvent, one IPS estimate per record.
    """
    known = {beacon.id for beacon in beacon_map_for(config).beacons}
    for tick, _, readings in records:
        unknown = sorted({beacon_id for beacon_id, _ in readings} - known)
        if unknown:
            raise ConfigError(f"replay record at tick {tick} names unknown beacons {unknown}")
    sim = config.sim
    tracker = IpsTracker(config.ips, Arena(sim.arena_width_m, sim.arena_height_m), beacon_map_for(config),
                         sim.sample_time_s, substream(int(sim.rng_seed), IPS_STREAM, 0),
                         config.estimation.pose_accel_sigma_mps2, config.estimation.pose_meas_sigma_m)
    events = []
    for tick, estimate in tracker.replay(records):
        payload = {"source": "ips", "x": estimate.x, "y": estimate.y}
        if estimate.pose is not None:
            payload["omega"] = estimate.pose.omega
            payload["speed"] = estimate.speed
        events.append(TraceEvent(tick, 0, "estimate", payload))
    global_log(f"[IPS] replayed {len(records)} records, {tracker.divergences} divergences")
    return events


def initial_positions(count, gap, track_length):
    """Arclengths with vehicle 0 ahead and every follower gap behind the previous one."""
    if (count - 1) * gap >= track_length:
        raise ConfigError(f"{count} vehicles spaced {gap} m do not fit a {track_length:.3f} m track")
    return [(count - 1 - i) * gap for i in range(count)]


class Simulation:
    """
    Closed-loop simulation of one configuration.

    Args:
        config: RunConfig (see config.py).
        trace: TraceWriter receiving the events of every tick.
    """

    def __init__(self, config, trace=None):
        self.config = config
        self.trace = trace or TraceWriter()
        sim = config.sim
        self.T = sim.sample_time_s
        self.tick_index = 0
        self.track = default_rectangle_track(sim)
        self.arena = Arena(sim.arena_width_m, sim.arena_height_m)
        self.beacon_map = beacon_map_for(config)
        self.beacon_positions = self.beacon_map.positions()
        self.model = platoon_model(self.T)
        self.cloud = CloudController(config, self.model, self.track)

        seed = int(sim.rng_seed)
        count = int(sim.vehicle_count)
        base_dir = getattr(config, "base_dir", None)
        self.uplinks = [build_link(f"up{v}", config.network.uplink, substream(seed, UPLINK_STREAM, v), base_dir)
                        for v in range(count)]
        self.downlinks = [build_link(f"down{v}", config.network.downlink, substream(seed, DOWNLINK_STREAM, v),
                                     base_dir)
                          for v in range(count)]

        positions = initial_positions(count, config.vehicle.initial_gap_m, self.track.total_length)
        slots = []
        for v, s in enumerate(positions):
            ips_rng = substream(seed, IPS_STREAM, v)
            tracker = None
            if config.ips.enabled:
                tracker = IpsTracker(config.ips, self.arena, self.beacon_map, self.T, ips_rng,
                                     config.estimation.pose_accel_sigma_mps2, config.estimation.pose_meas_sigma_m)
            slots.append(VehicleSlot(
                index=v,
                state=VehicleLongState(s=s, v=config.vehicle.initial_speed_mps),
                pose=track_pose(self.track, s),
                buffer=ActuatorBuffer(1, config.mpc.exhausted_policy),
                sensor_rng=substream(seed, SENSOR_STREAM, v),
                ips_rng=ips_rng,
                tracker=tracker,
            ))
        self.fleet = Fleet(slots)
        self.gap_history = [[] for _ in range(count)]
        self.ips_errors = []
        self.safety_violations = 0
        self.pf_divergences = 0

    def _gap(self, index):
        return self.fleet.gap(index, self.track.total_length)

    def _sample(self, slot, t, events):
        """Step 1 for one vehicle: ground truth event and sensor readings."""
        cfg = self.config
        rng = slot.sensor_rng
        gap = self._gap(slot.index)
        payload = {"s": slot.state.s, "v": slot.state.v, "x": slot.pose.x, "y": slot.pose.y, "omega": slot.pose.omega}
        if gap is not None:
            payload["gap"] = gap
        events.append(TraceEvent(t, slot.index, "state", payload))

        gap_reading = cfg.ultrasonic.read(gap if gap is not None else math.inf, rng)
        if gap is None:
            gap_reading = None
        speed = slot.state.v + float(rng.normal(0.0, cfg.encoder.noise_sigma_mps))
        stride = cfg.ips.stride_m
        bump = math.floor(slot.odometer_m / stride) > math.floor(slot.last_odometer_m / stride)
        accel = (cfg.ips.bump_mps2 if bump else 0.0) + float(rng.normal(0.0, cfg.ips.vibration_sigma_mps2))
        heading = slot.pose.omega + float(rng.normal(0.0, cfg.ips.heading_noise_rad))

        rss = []
        if cfg.ips.enabled and t % int(cfg.ips.rss_period_ticks) == 0:
            distances = np.hypot(self.beacon_positions[:, 0] - slot.pose.x, self.beacon_positions[:, 1] - slot.pose.y)
            for beacon, d in zip(self.beacon_map.beacons, distances):
                rss.append((beacon.id, rss_from_distance(cfg.ips.rss, max(float(d), MIN_BEACON_DISTANCE_M),
                                                         slot.ips_rng)))

        ips_xy = ips_speed = None
        if slot.last_ips is not None:
            ips_xy = (slot.last_ips.x, slot.last_ips.y)
            ips_speed = slot.last_ips.speed
        report = SensorReport(slot.index, speed, gap_reading, ips_xy, ips_speed)
        return report, (accel, heading, rss)

    def _send(self, link, payload, vehicle, t, events):
        packet, lost = link.send(payload, t)
        events.append(TraceEvent(t, vehicle, "packet_sent", {"link": link.link_id, "seq": packet.seq}))
        if lost:
            events.append(TraceEvent(t, vehicle, "packet_lost", {"link": link.link_id, "seq": packet.seq}))

    def _deliver(self, link, vehicle, t, events):
        packets = link.poll(t)
        for packet in packets:
            events.append(TraceEvent(t, vehicle, "packet_delivered",
                                     {"link": link.link_id, "seq": packet.seq, "send_tick": packet.send_tick}))
        return packets

    def _tick(self, t):
        cfg = self.config
        events = []

        # 1. sensors
        reports, imu = [], []
        for slot in self.fleet:
            report, readings = self._sample(slot, t, events)
            reports.append(report)
            imu.append(readings)

        # 2. uplink
        for slot, report in zip(self.fleet, reports):
            self._send(self.uplinks[slot.index], report, slot.index, t, events)

        # 3. cloud
        for slot in self.fleet:
            self.cloud.receive(self._deliver(self.uplinks[slot.index], slot.index, t, events), t)
        decisions = self.cloud.step(t)
        for decision in decisions:
            events.append(TraceEvent(t, decision.vehicle, "estimate",
                                     {"source": "platoon_kf", "x_hat": list(decision.x_hat)}))
            events.append(TraceEvent(t, decision.vehicle, "command", {
                "zone": decision.zone.value,
                "a": float(decision.sequence.commands[0][0]),
                "length": len(decision.sequence),
            }))
            if decision.mpc_inexact:
                events.append(TraceEvent(t, decision.vehicle, "mpc_inexact", {}))

        # 4. downlink
        for decision in decisions:
            self._send(self.downlinks[decision.vehicle], decision.sequence, decision.vehicle, t, events)

        # 5. actuators
        accelerations = []
        for slot in self.fleet:
            for packet in self._deliver(self.downlinks[slot.index], slot.index, t, events):
                slot.buffer.push(packet.payload)
            exhausted_before = slot.buffer.exhaustion_count
            accelerations.append(float(slot.buffer.pop()[0]))
            if slot.buffer.exhaustion_count > exhausted_before:
                events.append(TraceEvent(t, slot.index, "buffer_exhausted", {"policy": slot.buffer.exhausted_policy}))

        # 6. plant
        sampled_poses = [slot.pose for slot in self.fleet]
        for slot, a in zip(self.fleet, accelerations):
            before = slot.state.s
            slot.state = step_vehicle(slot.state, a, self.T, self.track.total_length, cfg.vehicle.v_max_mps)
            slot.last_odometer_m = slot.odometer_m
            slot.odometer_m += (slot.state.s - before) % self.track.total_length
            slot.pose = track_pose(self.track, slot.state.s)
        for slot in self.fleet:
            gap = self._gap(slot.index)
            if gap is None:
                continue
            self.gap_history[slot.index].append(gap)
            if gap < cfg.vehicle.contact_threshold_m:
                if not slot.in_contact:
                    slot.in_contact = True
                    self.safety_violations += 1
                    events.append(TraceEvent(t, slot.index, "safety_violation", {"gap": gap}))
            else:
                slot.in_contact = False

        # 7. IPS
        for slot, (accel, heading, rss), truth in zip(self.fleet, imu, sampled_poses):
            if slot.tracker is None:
                continue
            estimate = slot.tracker.step(accel, heading, rss)
            slot.last_ips = estimate
            if estimate.diverged:
                self.pf_divergences += 1
                events.append(TraceEvent(t, slot.index, "pf_divergence", {}))
            payload = {"source": "ips", "x": estimate.x, "y": estimate.y}
            if estimate.pose is not None:
                payload["omega"] = estimate.pose.omega
                payload["speed"] = estimate.speed
            events.append(TraceEvent(t, slot.index, "estimate", payload))
            self.ips_errors.append(math.hypot(estimate.x - truth.x, estimate.y - truth.y))

        # 8. trace
        self.trace.write(events)

    def tick(self):
        """Run one tick; faults are re-raised as SimulationFault carrying the tick."""
        t = self.tick_index
        try:
            self._tick(t)
        except SimulationFault as exc:
            if exc.tick is None:
                exc.tick = t
            raise
        except (PlatoonSimError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise SimulationFault(f"{type(exc).__name__}: {exc}", t) from exc
        self.tick_index += 1

    def run(self):
        for _ in range(self.config.sim.tick_count):
            self.tick()
        self.cloud.log_status()
        return self.summary()

    def summary(self):
        desired = self.config.lqr.desired_gap_m
        gap_rms, final_gap = [], []
        for history in self.gap_history[1:]:
            if history:
                errors = np.asarray(history) - desired
                gap_rms.append(float(np.sqrt(np.mean(errors * errors))))
                final_gap.append(float(history[-1]))
            else:
                gap_rms.append(0.0)
                final_gap.append(0.0)
        p50 = p90 = worst = 0.0
        if self.ips_errors:
            cdf = error_cdf(self.ips_errors)
            p50, p90, worst = cdf.p50, cdf.p90, cdf.max
        links = {link.link_id: link.stats() for link in self.uplinks + self.downlinks}
        return RunSummary(
            ticks=self.tick_index,
            vehicle_count=len(self.fleet),
            gap_rms_m=tuple(gap_rms),
            final_gap_m=tuple(final_gap),
            ips_error_p50_m=p50,
            ips_error_p90_m=p90,
            ips_error_max_m=worst,
            ips_samples=len(self.ips_errors),
            links=links,
            buffer_exhaustion_count=sum(slot.buffer.exhaustion_count for slot in self.fleet),
            stale_sequence_count=sum(slot.buffer.stale_count for slot in self.fleet),
            late_packet_count=self.cloud.late_packets,
            mpc_inexact_count=self.cloud.mpc_inexact,
            pf_divergence_count=self.pf_divergences,
            safety_violation_count=self.safety_violations,
        )


def run(config, out_dir=None):
    """
    Run config to completion.

    Writes trace.jsonl and summary.json into out_dir when given.

    Returns:
        RunSummary
    """
    # Construction validates the fleet layout and the gains before any file is created.
    simulation = Simulation(config)
    if out_dir is None:
        summary = simulation.run()
    else:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trace.jsonl", "w", encoding="utf-8", newline="\n") as stream:
            simulation.trace = TraceWriter(stream)
            summary = simulation.run()
        with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as stream:
            json.dump(summary.to_dict(), stream, indent=2, sort_keys=True)
            stream.write("\n")
    global_log(f"[SIM] {summary.ticks} ticks, {summary.safety_violation_count} safety violations")
    return summary
