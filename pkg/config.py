"""
config.py

Scenario files. A scenario is one YAML document whose top-level sections map
onto the frozen configuration dataclasses of the simulator modules:

    sim, vehicle, leader, scenario, lqr, mpc, controller, estimation,
    ultrasonic, encoder, network (uplink / downlink), ips (rss / pf / step)

Missing keys take the dataclass defaults. Unknown keys, at any depth, are
rejected with the dotted path of the offending key.
"""

import copy
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from control import LqrConfig, ScenarioConfig
from errors import ConfigError
from estimation import EstimationConfig
from ips import IpsConfig
from mpc import MpcConfig
from netsim import NetworkConfig
from sim import ControllerConfig, EncoderConfig, LeaderConfig, UltrasonicSensor, VehicleConfig
from sim_logger import global_log
from world import SimConfig


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = SimConfig()
    vehicle: VehicleConfig = VehicleConfig()
    leader: LeaderConfig = LeaderConfig()
    scenario: ScenarioConfig = ScenarioConfig()
    lqr: LqrConfig = LqrConfig()
    mpc: MpcConfig = MpcConfig()
    controller: ControllerConfig = ControllerConfig()
    estimation: EstimationConfig = EstimationConfig()
    ultrasonic: UltrasonicSensor = UltrasonicSensor()
    encoder: EncoderConfig = EncoderConfig()
    network: NetworkConfig = NetworkConfig()
    ips: IpsConfig = IpsConfig()
    # Directory relative trace paths resolve against; not part of the document.
    base_dir: str = field(default=None, compare=False)


SKIPPED_FIELDS = ("base_dir",)


def _freeze(value):
    """Lists from YAML become tuples so the dataclasses stay hashable."""
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def _section_type(cls, name):
    for f in fields(cls):
        if f.name == name and f.name not in SKIPPED_FIELDS:
            return f
    return None


def _build(cls, data, path):
    """Instantiate dataclass cls from a mapping, recursing into nested sections."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'document'}: expected a mapping, got {type(data).__name__}")
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else str(key)
        f = _section_type(cls, key)
        if f is None:
            raise ConfigError(f"unknown configuration key '{dotted}'")
        if is_dataclass(f.type):
            kwargs[key] = _build(f.type, value, dotted)
        else:
            kwargs[key] = _freeze(value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'document'}: invalid value ({exc})") from exc


def config_from_dict(raw, base_dir=None):
    config = _build(RunConfig, raw, "")
    return replace(config, base_dir=None if base_dir is None else str(base_dir))


def load_config(path):
    """
    Read and validate a scenario file.

    Args:
        path: YAML file path.

    Raises:
        ConfigError: unreadable file, YAML syntax error or invalid content.
    """
    path = Path(path)
    raw = load_raw(path)
    config = config_from_dict(raw, path.parent)
    global_log(f"[CONFIG] loaded {path}")
    return config


def load_raw(path):
    """The parsed YAML mapping of a scenario file, not yet validated."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def config_to_dict(config):
    """Plain nested dict of a configuration, every field included."""
    data = {}
    for f in fields(config):
        if f.name in SKIPPED_FIELDS:
            continue
        value = getattr(config, f.name)
        data[f.name] = config_to_dict(value) if is_dataclass(value) else _thaw(value)
    return data


def dump_config(config, path):
    with open(path, "w", encoding="utf-8") as stream:
        yaml.safe_dump(config_to_dict(config), stream, sort_keys=False)


def field_default(dotted_path):
    """Default value of the field a dotted path addresses; ConfigError when it does not exist."""
    cls = RunConfig
    parts = dotted_path.split(".")
    for i, part in enumerate(parts):
        f = _section_type(cls, part) if is_dataclass(cls) else None
        if f is None:
            raise ConfigError(f"unknown configuration key '{'.'.join(parts[:i + 1])}'")
        if i < len(parts) - 1:
            if not is_dataclass(f.type):
                raise ConfigError(f"'{'.'.join(parts[:i + 1])}' is not a section")
            cls = f.type
        else:
            return f.default


def override(raw, dotted_path, value):
    """
    Copy of the raw document with one field set.

    Args:
        raw: Parsed YAML mapping.
        dotted_path: Field address such as "network.downlink.channel.p_loss".
        value: New value.
    """
    field_default(dotted_path)
    result = copy.deepcopy(raw) if raw else {}
    node = result
    parts = dotted_path.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        node = child
    node[parts[-1]] = value
    return result
