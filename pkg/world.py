"""
world.py

Core domain types shared by every other module: the run configuration
(SimConfig), the closed track, the beacon map and planar poses.
All types here are immutable after construction.

Random streams are also handed out here. Every consumer (a link, a
vehicle's sensors, a vehicle's IPS) gets its own numpy Generator derived
from the master seed and a fixed integer key, so adding a consumer never
perturbs the draws of another.
"""

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle in radians to (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def substream(seed, *key):
    """
    Build an independent random Generator for one consumer.

    Args:
        seed: Master 64-bit seed of the run.
        key: Small non-negative integers naming the consumer.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


@dataclass(frozen=True)
class SimConfig:
    sample_time_s: float = 0.1
    duration_s: float = 60.0
    rng_seed: int = 0
    vehicle_count: int = 4
    full_speed_mps: float = 0.5
    arena_width_m: float = 3.0
    arena_height_m: float = 2.0
    track_margin_m: float = 0.3

    def __post_init__(self):
        if not self.sample_time_s > 0:
            raise ConfigError(f"sim.sample_time_s must be > 0, got {self.sample_time_s}")
        if not self.duration_s >= 0:
            raise ConfigError(f"sim.duration_s must be >= 0, got {self.duration_s}")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ConfigError(f"sim.rng_seed must be a 64-bit unsigned integer, got {self.rng_seed}")
        if int(self.vehicle_count) < 1:
            raise ConfigError(f"sim.vehicle_count must be >= 1, got {self.vehicle_count}")
        if not self.full_speed_mps > 0:
            raise ConfigError(f"sim.full_speed_mps must be > 0, got {self.full_speed_mps}")
        if not (self.arena_width_m > 0 and self.arena_height_m > 0):
            raise ConfigError("arena dimensions must be strictly positive")
        if self.track_margin_m < 0:
            raise ConfigError(f"sim.track_margin_m must be >= 0, got {self.track_margin_m}")

    @property
    def tick_count(self):
        """Number of ticks executed by a run."""
        return int(round(self.duration_s / self.sample_time_s))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    omega: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose coordinates must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "omega", wrap_angle(self.omega))


@dataclass(frozen=True)
class Track:
    """Closed polyline; the last segment returns to the first vertex."""

    vertices: tuple
    cumulative_arclength: tuple = field(init=False)
    total_length: float = field(init=False)

    def __post_init__(self):
        vertices = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(vertices) < 3:
            raise ConfigError(f"track needs at least 3 vertices, got {len(vertices)}")
        cumulative = [0.0]
        for i, (x0, y0) in enumerate(vertices):
            x1, y1 = vertices[(i + 1) % len(vertices)]
            length = math.hypot(x1 - x0, y1 - y0)
            if length <= 0.0:
                raise ConfigError(f"track segment {i} has zero length")
            cumulative.append(cumulative[-1] + length)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cumulative_arclength", tuple(cumulative))
        object.__setattr__(self, "total_length", cumulative[-1])

    @property
    def segment_count(self):
        return len(self.vertices)

    def segment(self, index):
        """Return (start, end, length) of segment index."""
        start = self.vertices[index]
        end = self.vertices[(index + 1) % len(self.vertices)]
        length = self.cumulative_arclength[index + 1] - self.cumulative_arclength[index]
        return start, end, length

    def check_inside(self, width, height):
        """Raise ConfigError when a vertex leaves the arena rectangle."""
        for x, y in self.vertices:
            if not (0.0 <= x <= width and 0.0 <= y <= height):
                raise ConfigError(f"track vertex ({x}, {y}) outside the {width} x {height} arena")


@dataclass(frozen=True)
class Beacon:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class BeaconMap:
    beacons: tuple

    def __post_init__(self):
        ids = [b.id for b in self.beacons]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"beacon ids must be unique, got {ids}")

    @property
    def count(self):
        return len(self.beacons)

    def positions(self):
        """Beacon positions as an (count, 2) array."""
        return np.array([(b.x, b.y) for b in self.beacons], dtype=float)

    def by_id(self, beacon_id):
        for beacon in self.beacons:
            if beacon.id == beacon_id:
                return beacon
        raise KeyError(beacon_id)


# Fractions of the arena used by the default five-beacon layout:
# four near the corners and one in the middle.
DEFAULT_BEACON_LAYOUT = ((0.05, 0.05), (0.95, 0.05), (0.95, 0.95), (0.05, 0.95), (0.5, 0.5))


def default_beacon_map(config):
    """Five beacons covering the arena of config."""
    beacons = tuple(
        Beacon(i, fx * config.arena_width_m, fy * config.arena_height_m)
        for i, (fx, fy) in enumerate(DEFAULT_BEACON_LAYOUT)
    )
    return BeaconMap(beacons)


def beacon_map_from_positions(positions, config):
    """Build a BeaconMap from (id, x, y) triples, checking they lie in the arena."""
    beacons = tuple(Beacon(int(i), float(x), float(y)) for i, x, y in positions)
    for b in beacons:
        if not (0.0 <= b.x <= config.arena_width_m and 0.0 <= b.y <= config.arena_height_m):
            raise ConfigError(f"beacon {b.id} at ({b.x}, {b.y}) outside the arena")
    return BeaconMap(beacons)


def default_rectangle_track(config):
    """
    Axis-aligned counterclockwise rectangle centered in the arena.

    Args:
        config: SimConfig; track_margin_m is kept free on every side.
    """
    margin = config.track_margin_m
    width, height = config.arena_width_m, config.arena_height_m
    if 2.0 * margin >= width or 2.0 * margin >= height:
        raise ConfigError(
            f"track margin {margin} m does not fit the {width} x {height} arena"
        )
    track = Track((
        (margin, margin),
        (width - margin, margin),
        (width - margin, height - margin),
        (margin, height - margin),
    ))
    track.check_inside(width, height)
    return track


def track_pose(track, s):
    """
    Pose at arclength s along the track.

    s is wrapped modulo the track length; heading is the segment direction.
    """
    s_mod = s % track.total_length
    if s_mod >= track.total_length:
        s_mod = 0.0
    index = bisect.bisect_right(track.cumulative_arclength, s_mod) - 1
    index = min(max(index, 0), track.segment_count - 1)
    (x0, y0), (x1, y1), length = track.segment(index)
    fraction = (s_mod - track.cumulative_arclength[index]) / length
    heading = math.atan2(y1 - y0, x1 - x0)
    return Pose(x0 + fraction * (x1 - x0), y0 + fraction * (y1 - y0), heading)


def track_project(track, x, y):
    """Arclength of the track point closest to (x, y)."""
    best_s, best_d2 = 0.0, math.inf
    for index in range(track.segment_count):
        (x0, y0), (x1, y1), length = track.segment(index)
        dx, dy = x1 - x0, y1 - y0
        t = ((x - x0) * dx + (y - y0) * dy) / (length * length)
        t = min(max(t, 0.0), 1.0)
        px, py = x0 + t * dx, y0 + t * dy
        d2 = (x - px) ** 2 + (y - py) ** 2
        if d2 < best_d2:
            best_d2 = d2
            best_s = track.cumulative_arclength[index] + t * length
    return best_s % track.total_length
