"""
test_sim.py

End-to-end tests of the tick orchestrator. The scenario runs are short but
exercise the whole loop: sensors, links, cloud controller, actuators, IPS.
"""

import hashlib
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from config import config_from_dict, load_config, load_raw, override
from errors import ConfigError, EstimationFault, SimulationFault
from sim import (
    SCHEMA_VERSION,
    Simulation,
    TraceEvent,
    TraceWriter,
    UltrasonicSensor,
    initial_positions,
    run,
)

SCENARIOS = Path(__file__).parent / "scenarios"


def quick(**sections):
    raw = {"sim": {"duration_s": 5.0, "vehicle_count": 2, "rng_seed": 5}, "ips": {"pf": {"particle_count_N": 100}}}
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return config_from_dict(raw)


def read_trace(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_zero_duration(tmp_path):
    summary = run(quick(sim={"duration_s": 0.0}), tmp_path)
    assert (tmp_path / "trace.jsonl").read_text() == ""
    assert summary.ticks == 0
    assert summary.gap_rms_m == (0.0,)
    assert summary.ips_samples == 0
    stored = json.loads((tmp_path / "summary.json").read_text())
    assert stored["schema_version"] == SCHEMA_VERSION
    assert stored["ticks"] == 0


def test_same_seed_same_trace(tmp_path):
    config = quick(sim={"duration_s": 3.0, "vehicle_count": 3},
                   network={"downlink": {"channel": {"p_loss": 0.2}, "jitter_ticks": 1}})
    digests = []
    for name in ("a", "b"):
        run(config, tmp_path / name)
        digests.append(hashlib.sha256((tmp_path / name / "trace.jsonl").read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_different_seed_different_trace(tmp_path):
    run(quick(), tmp_path / "a")
    run(quick(sim={"rng_seed": 6}), tmp_path / "b")
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() != (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_trace_records(tmp_path):
    run(quick(), tmp_path)
    records = read_trace(tmp_path / "trace.jsonl")
    ticks = [r["tick"] for r in records]
    assert ticks == sorted(ticks)
    assert set(ticks) == set(range(50))
    assert all(r["schema_version"] == SCHEMA_VERSION for r in records)
    first = [r for r in records if r["tick"] == 0]
    assert [r["kind"] for r in first[:2]] == ["state", "state"]
    kinds = {r["kind"] for r in records}
    assert {"state", "packet_sent", "packet_delivered", "estimate", "command"} <= kinds
    leader_state = [r for r in records if r["kind"] == "state" and r["vehicle"] == 0]
    assert all("gap" not in r for r in leader_state)
    follower_state = [r for r in records if r["kind"] == "state" and r["vehicle"] == 1]
    assert follower_state[0]["gap"] == pytest.approx(1.0)


def test_commands_wait_for_the_first_report(tmp_path):
    run(quick(), tmp_path)
    records = read_trace(tmp_path / "trace.jsonl")
    first_command = min(r["tick"] for r in records if r["kind"] == "command")
    # Uplink delay is one tick, so the first report reaches the cloud at tick 1.
    assert first_command == 1


def test_lossless_pair_converges_to_desired_gap():
    config = load_config(SCENARIOS / "lossless_pair.yaml")
    simulation = Simulation(config)
    summary = simulation.run()
    settled = simulation.gap_history[1][int(30.0 / config.sim.sample_time_s):]
    assert len(settled) == 300
    assert all(0.09 <= gap <= 0.11 for gap in settled)
    assert simulation.fleet[0].state.v == pytest.approx(0.45, abs=0.01)
    assert summary.safety_violation_count == 0
    assert summary.late_packet_count == 0


def test_lossless_pair_stays_in_lqr_zone(tmp_path):
    run(load_config(SCENARIOS / "lossless_pair.yaml"), tmp_path)
    zones = {r["zone"] for r in read_trace(tmp_path / "trace.jsonl")
             if r["kind"] == "command" and r["vehicle"] == 1 and r["tick"] >= 300}
    assert zones == {"lqr"}


def test_four_vehicles_hold_desired_gap():
    config = load_config(SCENARIOS / "four_vehicles.yaml")
    simulation = Simulation(config)
    summary = simulation.run()
    assert summary.vehicle_count == 4
    assert summary.safety_violation_count == 0
    tail = int(30.0 / config.sim.sample_time_s)
    for history in simulation.gap_history[1:]:
        assert all(0.09 <= gap <= 0.11 for gap in history[-tail:])


def test_buffer_absorbs_downlink_loss():
    raw = load_raw(SCENARIOS / "mpc_loss.yaml")
    buffered = run(config_from_dict(raw))
    lossless = run(config_from_dict(override(raw, "network.downlink.channel.p_loss", 0.0)))
    unbuffered = run(load_config(SCENARIOS / "unbuffered_loss.yaml"))
    assert buffered.gap_rms_m[0] <= 2.0 * lossless.gap_rms_m[0]
    assert buffered.gap_rms_m[0] < unbuffered.gap_rms_m[0]
    assert lossless.buffer_exhaustion_count <= buffered.buffer_exhaustion_count


def test_dead_downlink_leaves_fleet_stopped(tmp_path):
    config = quick(network={"downlink": {"channel": {"p_loss": 1.0}}}, ips={"enabled": False})
    summary = run(config, tmp_path)
    records = read_trace(tmp_path / "trace.jsonl")
    assert all(r["v"] == 0.0 for r in records if r["kind"] == "state")
    assert summary.final_gap_m == (1.0,)
    assert summary.links["down0"]["delivered"] == 0


def test_ips_samples_recorded():
    summary = run(quick())
    assert summary.ips_samples == 2 * 50
    assert 0.0 <= summary.ips_error_p50_m <= summary.ips_error_p90_m <= summary.ips_error_max_m


def test_ips_disabled():
    summary = run(quick(ips={"enabled": False}))
    assert summary.ips_samples == 0
    assert summary.ips_error_p90_m == 0.0


def test_fault_carries_tick():
    simulation = Simulation(quick())
    simulation.tick()
    simulation.tick()

    def broken(now_tick):
        raise EstimationFault("innovation covariance singular")

    simulation.cloud.step = broken
    with pytest.raises(SimulationFault) as info:
        simulation.tick()
    assert info.value.tick == 2
    assert str(info.value).startswith("tick 2:")
    assert isinstance(info.value.__cause__, EstimationFault)


def test_fleet_must_fit_track():
    assert initial_positions(3, 0.5, 10.0) == [1.0, 0.5, 0.0]
    with pytest.raises(ConfigError):
        initial_positions(20, 1.0, 6.0)
    with pytest.raises(ConfigError):
        Simulation(quick(sim={"vehicle_count": 20}))


def test_trace_writer_rejects_out_of_order():
    stream = io.StringIO()
    writer = TraceWriter(stream)
    writer.write([TraceEvent(3, 0, "state", {"v": 0.0})])
    with pytest.raises(SimulationFault):
        writer.write([TraceEvent(2, 0, "state", {"v": 0.0})])
    line = json.loads(stream.getvalue().splitlines()[0])
    assert line == {"schema_version": SCHEMA_VERSION, "tick": 3, "vehicle": 0, "kind": "state", "v": 0.0}


def test_ultrasonic_reading():
    rng = np.random.default_rng(0)
    sensor = UltrasonicSensor(noise_sigma_m=0.0, dropout_prob=0.0)
    assert sensor.read(0.5, rng) == 0.5
    assert sensor.read(2.5, rng) is None
    assert UltrasonicSensor(dropout_prob=1.0).read(0.5, rng) is None


def test_lone_leader_reaches_cruise_speed():
    simulation = Simulation(quick(sim={"vehicle_count": 1, "duration_s": 3.0}, ips={"enabled": False}))
    speeds = []
    for _ in range(simulation.config.sim.tick_count):
        simulation.tick()
        speeds.append(simulation.fleet[0].state.v)
    # One tick up, one tick down, then an a_max-limited ramp of 0.45 s.
    assert speeds[10] == pytest.approx(0.45, abs=0.02)
    assert speeds[-1] == pytest.approx(0.45, abs=0.02)
    assert max(speeds) <= 0.45 + 0.03


def tick_phase(record):
    """Position of a trace event in the per-tick order of the loop."""
    kind = record["kind"]
    uplink = record.get("link", "").startswith("up")
    if kind == "state":
        return 1
    if kind in ("packet_sent", "packet_lost"):
        return 2 if uplink else 5
    if kind == "packet_delivered":
        return 3 if uplink else 6
    if kind in ("command", "mpc_inexact") or (kind == "estimate" and record["source"] == "platoon_kf"):
        return 4
    if kind == "buffer_exhausted":
        return 6
    if kind == "safety_violation":
        return 7
    return 8


def test_events_follow_tick_order(tmp_path):
    config = quick(sim={"duration_s": 4.0, "vehicle_count": 3},
                   controller={"mode": "mpc_buffered"},
                   network={"downlink": {"channel": {"p_loss": 0.3}, "jitter_ticks": 1}})
    run(config, tmp_path)
    records = read_trace(tmp_path / "trace.jsonl")
    for tick in range(config.sim.tick_count):
        phases = [tick_phase(r) for r in records if r["tick"] == tick]
        assert phases == sorted(phases), f"tick {tick}"
        assert phases.count(1) == 3
    kinds = {r["kind"] for r in records}
    assert {"packet_lost", "buffer_exhausted"} & kinds


def cloud_estimates(config, kick_after=None):
    """Platoon filter estimates per tick; optionally moves the follower 3 cm forward after a tick."""
    stream = io.StringIO()
    simulation = Simulation(config, TraceWriter(stream))
    for t in range(config.sim.tick_count):
        simulation.tick()
        if t == kick_after:
            follower = simulation.fleet[1]
            follower.state = replace(follower.state, s=(follower.state.s + 0.03) % simulation.track.total_length)
    records = [json.loads(line) for line in stream.getvalue().splitlines()]
    return {r["tick"]: r["x_hat"] for r in records
            if r["kind"] == "estimate" and r["source"] == "platoon_kf" and r["vehicle"] == 1}


def test_controller_sees_plant_only_through_uplink_delay():
    raw = load_raw(SCENARIOS / "lossless_pair.yaml")
    raw = override(raw, "sim.duration_s", 25.0)
    raw = override(raw, "network.uplink.delay_ticks", 2)
    raw = override(raw, "ips.enabled", False)
    raw = override(raw, "ultrasonic.dropout_prob", 0.0)
    config = config_from_dict(raw)
    baseline = cloud_estimates(config)
    kicked = cloud_estimates(config, kick_after=200)
    # The state after tick 200 is sampled at 201 and reaches the cloud at 203.
    for tick in range(204):
        assert kicked.get(tick) == baseline.get(tick), f"tick {tick}"
    assert kicked[203][0] < baseline[203][0]


def test_invalid_fleet_writes_no_trace(tmp_path):
    with pytest.raises(ConfigError):
        run(quick(sim={"vehicle_count": 20}), tmp_path / "out")
    assert not (tmp_path / "out" / "trace.jsonl").exists()
