"""
test_cloud.py

Tests for the remote controller: report bookkeeping, delay handling and the
command sequences it issues.
"""

import pytest

from cloud import MPC_BUFFERED, CloudController, SensorReport, square_wave_accel
from config import config_from_dict
from control import Zone
from dynamics import platoon_model
from netsim import Packet
from world import default_rectangle_track


def controller(**sections):
    raw = {"sim": {"vehicle_count": 2}}
    raw.update(sections)
    config = config_from_dict(raw)
    return CloudController(config, platoon_model(config.sim.sample_time_s), default_rectangle_track(config.sim))


def packets(send_tick, *reports):
    return [Packet(i, send_tick, report, f"up{report.vehicle}") for i, report in enumerate(reports)]


def test_square_wave():
    assert [square_wave_accel(k, 1.0, 0.2, 4.0) for k in range(8)] == [0.2, 0.2, -0.2, -0.2] * 2


def test_no_decision_before_first_report():
    cloud = controller()
    assert cloud.step(0) == []
    cloud.receive([], 1)
    assert cloud.step(1) == []


def test_decisions_after_report():
    cloud = controller()
    cloud.receive(packets(0, SensorReport(0, 0.0), SensorReport(1, 0.0, gap_m=1.0)), 1)
    decisions = cloud.step(1)
    assert [d.vehicle for d in decisions] == [0, 1]
    leader, follower = decisions
    assert leader.zone == Zone.LEADER
    assert leader.sequence.commands[0][0] > 0.0
    assert follower.zone == Zone.LQR
    assert len(follower.sequence) == 1
    assert follower.x_hat[0] == pytest.approx(1.0, abs=0.05)
    assert cloud.issued_at(0, 2) == leader.sequence.commands[0][0]


def test_late_packets_counted():
    cloud = controller()
    cloud.receive(packets(0, SensorReport(0, 0.0)), 3)
    assert cloud.late_packets == 1
    assert cloud.step(3) == []


def test_follower_waits_for_first_gap():
    cloud = controller()
    # Ultrasonic dropout on the first report: only speeds arrive for the follower.
    cloud.receive(packets(0, SensorReport(0, 0.0), SensorReport(1, 0.0)), 1)
    assert [d.vehicle for d in cloud.step(1)] == [0]
    cloud.receive(packets(1, SensorReport(0, 0.0), SensorReport(1, 0.0, gap_m=1.0)), 2)
    follower = cloud.step(2)[1]
    assert follower.zone == Zone.LQR
    assert follower.x_hat[0] == pytest.approx(1.0, abs=0.05)
    assert follower.sequence.commands[0][0] > 0.0


def test_follower_starts_in_lqr_zone_memory():
    cloud = controller()
    # Just past the leader threshold, still held by the LQR zone a follower starts in.
    cloud.receive(packets(0, SensorReport(0, 0.3), SensorReport(1, 0.3, gap_m=1.05)), 1)
    follower = cloud.step(1)[1]
    assert follower.x_hat[0] > 1.0
    assert follower.zone == Zone.LQR
    assert cloud.zones == [Zone.LEADER, Zone.LQR]


def test_buffered_mpc_sends_full_horizon():
    cloud = controller(controller={"mode": MPC_BUFFERED}, mpc={"horizon_steps": 6})
    cloud.receive(packets(0, SensorReport(0, 0.2), SensorReport(1, 0.2, gap_m=0.5)), 1)
    follower = cloud.step(1)[1]
    assert follower.zone == Zone.LQR
    assert len(follower.sequence) == 6
    assert all(abs(u[0]) <= 1.0 for u in follower.sequence.commands)
    assert follower.sequence.created_at_tick == 1


def test_unbuffered_mpc_sends_one_command():
    cloud = controller(controller={"mode": MPC_BUFFERED, "buffer_enabled": False})
    cloud.receive(packets(0, SensorReport(0, 0.2), SensorReport(1, 0.2, gap_m=0.5)), 1)
    assert len(cloud.step(1)[1].sequence) == 1


def test_stop_zone_brakes():
    cloud = controller()
    cloud.receive(packets(0, SensorReport(0, 0.3), SensorReport(1, 0.3, gap_m=0.03)), 1)
    follower = cloud.step(1)[1]
    assert follower.zone == Zone.STOP
    assert follower.sequence.commands[0][0] < 0.0
