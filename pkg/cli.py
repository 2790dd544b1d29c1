"""
cli.py

Command-line interface of the simulator.

    run       run one scenario, write trace.jsonl and summary.json
    sweep     run a scenario once per value of one numeric field
    cdf       positioning-error CDF from a trace file
    validate  check a scenario file without running it
    replay    run a recorded RSS/IMU log through the positioning pipeline

Exit codes: 0 success, 1 configuration or input error (including gains that
cannot be synthesized before tick 0), 2 simulation fault.

Sweep point i runs exactly what `run --seed sweep_seed(master, i)` runs on the
overridden scenario, so any point can be reproduced alone.

Only results are printed to stdout; diagnostics go through the log.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from config import config_from_dict, field_default, load_config, load_raw, override
from errors import ConfigError, InputError, PlatoonSimError, SimulationFault
from ips import error_cdf, load_replay_log
from sim import Simulation, TraceWriter, replay_ips, run
from sim_logger import configure_logging, global_log

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAULT = 2

OUT_DIR_ENV = "PLATOON_SIM_OUT"
SWEEP_COLUMNS = ("index", "value", "seed", "gap_rms_m", "ips_error_p90_m", "packets_lost", "buffer_exhaustions")


def default_out_dir():
    return os.environ.get(OUT_DIR_ENV, "out")


def sweep_seed(master_seed, index):
    """Sub-seed of sweep point index; independent of how many points the sweep has."""
    sequence = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _error(message):
    global_log(f"[CLI] {message}", logging.ERROR)


def cmd_run(args):
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = replace(config, sim=replace(config.sim, rng_seed=args.seed))
        summary = run(config, args.out)
    except SimulationFault as exc:
        _error(f"simulation fault: {exc}")
        return EXIT_FAULT
    except PlatoonSimError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    print(summary.format_table())
    return EXIT_OK


def parse_values(text):
    """Comma separated sweep values, each parsed as a YAML scalar."""
    values = [yaml.safe_load(item) for item in text.split(",") if item.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _sweep_point(job):
    """Worker for one sweep point; module level so worker processes can pickle it."""
    index, value, seed, raw, base_dir, out_dir = job
    config = config_from_dict(raw, base_dir)
    summary = run(config, out_dir)
    lost = sum(stats["dropped"] for stats in summary.links.values())
    gap_rms = max(summary.gap_rms_m) if summary.gap_rms_m else 0.0
    return {
        "index": index,
        "value": value,
        "seed": seed,
        "gap_rms_m": gap_rms,
        "ips_error_p90_m": summary.ips_error_p90_m,
        "packets_lost": lost,
        "buffer_exhaustions": summary.buffer_exhaustion_count,
    }


def cmd_sweep(args):
    try:
        values = parse_values(args.values)
        default = field_default(args.param)
        if default is not None and not _is_number(default):
            raise ConfigError(f"'{args.param}' is not a numeric field")
        for value in values:
            if not _is_number(value):
                raise ConfigError(f"sweep value {value!r} is not a number")
        raw = load_raw(args.config)
        base = config_from_dict(raw, Path(args.config).parent)
        master_seed = base.sim.rng_seed if args.seed is None else args.seed
        out = Path(args.out)
        jobs = []
        for index, value in enumerate(values):
            seed = sweep_seed(master_seed, index)
            point = override(override(raw, args.param, value), "sim.rng_seed", seed)
            # Validate and wire every point before any of them runs.
            Simulation(config_from_dict(point, Path(args.config).parent))
            jobs.append((index, value, seed, point, str(Path(args.config).parent), str(out / f"point_{index:03d}")))
    except PlatoonSimError as exc:
        _error(str(exc))
        return EXIT_CONFIG

    global_log(f"[CLI] sweeping {args.param} over {len(values)} values")
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                rows = list(pool.map(_sweep_point, jobs))
        else:
            rows = [_sweep_point(job) for job in jobs]
    except SimulationFault as exc:
        _error(f"simulation fault: {exc}")
        return EXIT_FAULT
    except PlatoonSimError as exc:
        _error(str(exc))
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(stream, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(" ".join(SWEEP_COLUMNS))
    for row in rows:
        print(" ".join(str(row[column]) for column in SWEEP_COLUMNS))
    return EXIT_OK


def positioning_errors(trace_path):
    """
    Distances between IPS estimates and ground truth, joined on (tick, vehicle).

    Raises:
        InputError: a line is not a JSON record, or the trace has no IPS estimates.
    """
    truth, estimates = {}, []
    try:
        lines = Path(trace_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read trace {trace_path}: {exc}") from exc
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            kind = record["kind"]
            key = (record["tick"], record["vehicle"])
            if kind == "state":
                truth[key] = (float(record["x"]), float(record["y"]))
            elif kind == "estimate" and record.get("source") == "ips":
                estimates.append((key, float(record["x"]), float(record["y"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{trace_path}:{number}: malformed trace record ({exc})") from exc
    errors = []
    for key, x, y in estimates:
        if key in truth:
            tx, ty = truth[key]
            errors.append(math.hypot(x - tx, y - ty))
    if not errors:
        raise InputError(f"{trace_path}: no IPS estimate events with matching ground truth")
    return errors


def write_cdf(points, path):
    with open(path, "w", encoding="utf-8", newline="\n") as stream:
        stream.write("error_m cumulative_fraction\n")
        for error, fraction in points:
            stream.write(f"{error!r} {fraction!r}\n")


def cmd_cdf(args):
    try:
        cdf = error_cdf(positioning_errors(args.trace))
    except InputError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path(args.trace).with_name("cdf.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cdf(cdf.points, out)
    print(f"p50 {cdf.p50:.6f}")
    print(f"p90 {cdf.p90:.6f}")
    print(f"max {cdf.max:.6f}")
    return EXIT_OK


def cmd_validate(args):
    try:
        config = load_config(args.config)
        # Geometry, beacons and trace files are checked while wiring the run.
        Simulation(config)
    except PlatoonSimError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    print(f"valid {args.config}")
    return EXIT_OK


def cmd_replay(args):
    try:
        config = load_config(args.config) if args.config else config_from_dict({})
        events = replay_ips(config, load_replay_log(args.log))
    except PlatoonSimError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "replay.jsonl", "w", encoding="utf-8", newline="\n") as stream:
        TraceWriter(stream).write(events)
    print(f"records {len(events)}")
    if events:
        last = events[-1].payload
        print(f"final {last['x']:.6f} {last['y']:.6f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="platoon-sim", description="Wireless platoon testbed simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=default_out_dir())
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario over values of one field")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, help="dotted field path, e.g. network.downlink.channel.p_loss")
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--out", default=default_out_dir())
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("cdf", help="positioning error CDF of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_cdf)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("replay", help="run a recorded RSS/IMU log through the IPS")
    p.add_argument("--log", required=True)
    p.add_argument("--config", default=None, help="scenario supplying the ips section and arena")
    p.add_argument("--out", default=default_out_dir())
    p.set_defaults(handler=cmd_replay)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
