"""
ips.py

Indoor positioning from beacon RSS: the log-distance path loss model and its
inverse, step detection on the accelerometer, and a particle filter over the
vehicle's (x, y) position with four stages:

  1. prediction: move particles by a detected step, clamped to the arena
  2. update: weight particles by the likelihood of each beacon range
  3. resample: systematic resampling when the effective sample size is low
  4. extract: the weighted mean of the particles

RSS decreases with distance: RSS(d) = RSS(d0) - 10 n log10(d / d0), and
d = d0 * 10 ** ((RSS(d0) - RSS) / (10 n)) inverts it exactly.
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from errors import ConfigError, InputError, ParticleDivergence
from estimation import LOST, pose_filter_step, pose_kf_model
from sim_logger import global_log

# Weight factor for particles pushed back inside the arena by map matching.
OUT_OF_ARENA_PENALTY = 0.1
# Ranges are floored here before taking logs.
MIN_RANGE_M = 1e-3


@dataclass(frozen=True)
class RssModel:
    rss_at_d0_dbm: float = -60.0
    d0_m: float = 1.0
    path_loss_exponent_n: float = 2.0
    noise_sigma_db: float = 2.0

    def __post_init__(self):
        if not self.d0_m > 0:
            raise ConfigError(f"rss.d0_m must be > 0, got {self.d0_m}")
        if not self.path_loss_exponent_n > 0:
            raise ConfigError(f"rss.path_loss_exponent_n must be > 0, got {self.path_loss_exponent_n}")
        if self.noise_sigma_db < 0:
            raise ConfigError(f"rss.noise_sigma_db must be >= 0, got {self.noise_sigma_db}")


def rss_from_distance(model, d, rng=None):
    """
    RSS in dBm received at distance d.

    Args:
        model: RssModel.
        d: Distance in meters, > 0.
        rng: numpy Generator; when given, Gaussian noise of noise_sigma_db is added.
    """
    if not d > 0:
        raise InputError(f"distance must be > 0, got {d}")
    rss = model.rss_at_d0_dbm - 10.0 * model.path_loss_exponent_n * math.log10(d / model.d0_m)
    if rng is not None and model.noise_sigma_db > 0:
        rss += float(rng.normal(0.0, model.noise_sigma_db))
    return rss


def distance_from_rss(model, rss):
    """Distance in meters for a received RSS (closed-form inverse)."""
    exponent = (model.rss_at_d0_dbm - rss) / (10.0 * model.path_loss_exponent_n)
    return model.d0_m * 10.0 ** exponent


def ranging_sigma_fraction(model):
    """
    Relative spread of a range inverted from one noisy RSS reading.

    A dB error e scales the range by 10 ** (e / (10 n)), about
    1 + e ln(10) / (10 n) for small e.
    """
    return model.noise_sigma_db * math.log(10.0) / (10.0 * model.path_loss_exponent_n)


@dataclass(frozen=True)
class StepDetectorConfig:
    accel_threshold_mps2: float = 0.15
    min_interval_ticks: int = 2

    def __post_init__(self):
        if not self.accel_threshold_mps2 > 0:
            raise ConfigError("step.accel_threshold_mps2 must be > 0")
        if int(self.min_interval_ticks) < 1:
            raise ConfigError("step.min_interval_ticks must be >= 1")


class StepDetector:
    """Fires when |accel| exceeds the threshold, at most once per min_interval_ticks."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.index = -1
        self.last_detection = None

    def update(self, accel):
        self.index += 1
        if abs(accel) <= self.cfg.accel_threshold_mps2:
            return False
        if self.last_detection is not None and self.index - self.last_detection < self.cfg.min_interval_ticks:
            return False
        self.last_detection = self.index
        return True


def step_detections(accel_history, cfg):
    """Indices of accel_history at which a step is detected."""
    detector = StepDetector(cfg)
    return [i for i, accel in enumerate(accel_history) if detector.update(accel)]


def detect_step(accel_history, cfg):
    """True when the newest sample of accel_history triggers a step."""
    if len(accel_history) == 0:
        raise InputError("step detection needs at least one sample")
    detections = step_detections(accel_history, cfg)
    return bool(detections) and detections[-1] == len(accel_history) - 1


@dataclass(frozen=True)
class PfConfig:
    particle_count_N: int = 1000
    sigma_update_m: float = 0.10
    step_noise_length_m: float = 0.02
    step_noise_heading_rad: float = 0.05
    resample_neff_fraction: float = 0.5
    resample_jitter_m: float = 0.01
    # Range spread grows by this fraction of the reported range; None derives it
    # from the RSS noise when the tracker is built.
    range_sigma_fraction: float = None

    def __post_init__(self):
        if int(self.particle_count_N) < 1:
            raise ConfigError("pf.particle_count_N must be >= 1")
        if not (self.sigma_update_m > 0 and self.step_noise_length_m > 0 and self.step_noise_heading_rad > 0):
            raise ConfigError("pf sigmas must be > 0")
        if not 0 <= self.resample_neff_fraction <= 1:
            raise ConfigError("pf.resample_neff_fraction must be in [0, 1]")
        if self.resample_jitter_m < 0:
            raise ConfigError("pf.resample_jitter_m must be >= 0")
        if self.range_sigma_fraction is not None and not self.range_sigma_fraction >= 0:
            raise ConfigError("pf.range_sigma_fraction must be >= 0")


@dataclass(frozen=True, eq=False)
class ParticleSet:
    xy: np.ndarray
    w: np.ndarray

    def __len__(self):
        return self.w.shape[0]

    @property
    def effective_size(self):
        return float(1.0 / np.sum(self.w * self.w))


@dataclass(frozen=True)
class Arena:
    width: float
    height: float

    def clamp(self, xy):
        """Clamp positions to the arena; returns (clamped, moved mask)."""
        clamped = np.clip(xy, [0.0, 0.0], [self.width, self.height])
        moved = np.any(clamped != xy, axis=1)
        return clamped, moved


def pf_init(cfg, arena, rng):
    """N particles uniform over the arena with equal weights."""
    n = int(cfg.particle_count_N)
    xy = np.column_stack((rng.uniform(0.0, arena.width, n), rng.uniform(0.0, arena.height, n)))
    return ParticleSet(xy, np.full(n, 1.0 / n))


def _normalized(w):
    total = np.sum(w)
    if not total > 0 or not np.isfinite(total):
        raise ParticleDivergence("particle weights sum to zero")
    return w / total


def pf_predict(particles, heading, step_length, cfg, arena, rng=None):
    """
    Move every particle by one detected step.

    Each particle moves (step_length + eL) along heading + eT with Gaussian
    noise; rng=None moves them without noise. Particles leaving the arena are
    clamped to its boundary and their weight multiplied by 0.1.
    """
    n = len(particles)
    if rng is None:
        lengths = np.full(n, float(step_length))
        headings = np.full(n, float(heading))
    else:
        lengths = step_length + rng.normal(0.0, cfg.step_noise_length_m, n)
        headings = heading + rng.normal(0.0, cfg.step_noise_heading_rad, n)
    moved = particles.xy + np.column_stack((lengths * np.cos(headings), lengths * np.sin(headings)))
    clamped, outside = arena.clamp(moved)
    w = particles.w.copy()
    w[outside] *= OUT_OF_ARENA_PENALTY
    return ParticleSet(clamped, _normalized(w))


def range_likelihood(reported, theoretical, sigma):
    """Normal density of the reported range given the theoretical one."""
    return np.exp(-((reported - theoretical) ** 2) / (2.0 * sigma * sigma)) / math.sqrt(2.0 * math.pi * sigma * sigma)


def log_range_likelihood(reported, theoretical, sigma_log):
    """Gaussian in log range: the likelihood of a range scaled by log-normal noise."""
    residual = np.log(reported / np.maximum(theoretical, MIN_RANGE_M))
    return np.exp(-(residual ** 2) / (2.0 * sigma_log * sigma_log))


def pf_update(particles, beacon_distances, beacon_map, cfg):
    """
    Weight particles by the reported beacon ranges and normalize.

    Args:
        particles: ParticleSet.
        beacon_distances: (beacon_id, distance) pairs, at least one.
        beacon_map: BeaconMap with the beacon positions.
        cfg: PfConfig. With range_sigma_fraction 0 each beacon range has the
            Gaussian spread sigma_update_m. Otherwise the residual is taken in
            log range, with spread range_sigma_fraction widened in quadrature
            by sigma_update_m relative to the reported range.

    Raises:
        ParticleDivergence: every weight underflowed to zero.
    """
    if not beacon_distances:
        raise InputError("update needs at least one beacon distance")
    fraction = cfg.range_sigma_fraction or 0.0
    w = particles.w.copy()
    for beacon_id, reported in beacon_distances:
        beacon = beacon_map.by_id(beacon_id)
        theoretical = np.hypot(particles.xy[:, 0] - beacon.x, particles.xy[:, 1] - beacon.y)
        if fraction > 0:
            reported = max(reported, MIN_RANGE_M)
            w *= log_range_likelihood(reported, theoretical, math.hypot(fraction, cfg.sigma_update_m / reported))
        else:
            w *= range_likelihood(reported, theoretical, cfg.sigma_update_m)
    return ParticleSet(particles.xy.copy(), _normalized(w))


def systematic_indexes(w, offset):
    """Systematic resampling pointers (offset + i) / N into the weight CDF."""
    n = w.shape[0]
    positions = (offset + np.arange(n)) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def pf_resample(particles, cfg, rng, arena=None):
    """
    Systematic resampling when N_eff = 1 / sum(w^2) < fraction * N.

    Copies are displaced by resample_jitter_m Gaussian noise (0 keeps exact
    copies) and clamped to the arena when one is given.
    """
    n = len(particles)
    if particles.effective_size >= cfg.resample_neff_fraction * n:
        return particles
    indexes = systematic_indexes(particles.w, rng.random())
    xy = particles.xy[indexes].copy()
    if cfg.resample_jitter_m > 0:
        xy += rng.normal(0.0, cfg.resample_jitter_m, xy.shape)
        if arena is not None:
            xy, _ = arena.clamp(xy)
    return ParticleSet(xy, np.full(n, 1.0 / n))


def pf_extract(particles):
    """Weighted mean position (x, y)."""
    x, y = particles.w @ particles.xy
    return float(x), float(y)


@dataclass(frozen=True)
class CdfResult:
    points: tuple
    p50: float
    p90: float
    max: float


def nearest_rank(sorted_values, percent):
    """Nearest-rank percentile of an ascending sequence; percent is an integer."""
    n = len(sorted_values)
    rank = max(1, -(-percent * n // 100))
    return float(sorted_values[rank - 1])


def error_cdf(errors):
    """
    Empirical CDF of positioning errors with nearest-rank p50/p90 and max.

    Returns:
        CdfResult whose points are (error, cumulative fraction), one per distinct error.
    """
    values = np.sort(np.asarray(errors, dtype=float))
    if values.size == 0:
        raise InputError("error CDF needs at least one sample")
    distinct, counts = np.unique(values, return_counts=True)
    fractions = np.cumsum(counts) / values.size
    points = tuple((float(e), float(f)) for e, f in zip(distinct, fractions))
    return CdfResult(points, nearest_rank(values, 50), nearest_rank(values, 90), float(values[-1]))


@dataclass(frozen=True)
class IpsConfig:
    enabled: bool = True
    rss: RssModel = RssModel()
    pf: PfConfig = PfConfig()
    step: StepDetectorConfig = StepDetectorConfig()
    stride_m: float = 0.1
    bump_mps2: float = 0.5
    vibration_sigma_mps2: float = 0.02
    heading_noise_rad: float = 0.05
    rss_period_ticks: int = 1
    # (id, x, y) triples; None uses the default five-beacon layout.
    beacons: tuple = None

    def __post_init__(self):
        if not self.stride_m > 0:
            raise ConfigError("ips.stride_m must be > 0")
        if self.vibration_sigma_mps2 < 0 or self.heading_noise_rad < 0:
            raise ConfigError("ips noise sigmas must be >= 0")
        if int(self.rss_period_ticks) < 1:
            raise ConfigError("ips.rss_period_ticks must be >= 1")


@dataclass(frozen=True)
class IpsEstimate:
    x: float
    y: float
    pose: object
    speed: float
    step_detected: bool
    diverged: bool = False


class IpsTracker:
    """
    Car-side positioning pipeline of one vehicle.

    Each tick takes the vertical accelerometer sample, the measured heading
    and the RSS readings of the beacons heard in this tick.
    """

    def __init__(self, cfg, arena, beacon_map, T, rng, pose_accel_sigma=0.2, pose_meas_sigma=0.03):
        self.cfg = cfg
        self.arena = arena
        self.beacon_map = beacon_map
        self.rng = rng
        self.pf_cfg = cfg.pf
        if self.pf_cfg.range_sigma_fraction is None:
            self.pf_cfg = replace(self.pf_cfg, range_sigma_fraction=ranging_sigma_fraction(cfg.rss))
        self.detector = StepDetector(cfg.step)
        self.particles = pf_init(self.pf_cfg, arena, rng)
        self.pose_model = pose_kf_model(T, pose_accel_sigma, pose_meas_sigma)
        self.pose_state = None
        self.divergences = 0

    def step(self, accel_sample, heading, rss_readings):
        """
        Run one tick of the pipeline.

        Args:
            accel_sample: Vertical accelerometer reading (m/s^2).
            heading: Measured heading (rad).
            rss_readings: (beacon_id, rss_dbm) pairs; empty when no beacon was heard.
        """
        stepped = self.detector.update(accel_sample)
        if stepped:
            self.particles = pf_predict(self.particles, heading, self.cfg.stride_m, self.pf_cfg, self.arena, self.rng)
        diverged = False
        fix = LOST
        if rss_readings:
            distances = [(beacon_id, distance_from_rss(self.cfg.rss, rss)) for beacon_id, rss in rss_readings]
            try:
                self.particles = pf_update(self.particles, distances, self.beacon_map, self.pf_cfg)
            except ParticleDivergence:
                diverged = True
                self.divergences += 1
                global_log("[IPS] particle weights underflowed, re-initializing")
                self.particles = pf_init(self.pf_cfg, self.arena, self.rng)
            else:
                self.particles = pf_resample(self.particles, self.pf_cfg, self.rng, self.arena)
            fix = pf_extract(self.particles)
        elif stepped:
            fix = pf_extract(self.particles)
        self.pose_state, pose = pose_filter_step(self.pose_state, fix, self.pose_model)
        if fix is LOST:
            fix = pf_extract(self.particles)
        speed = self.pose_state.speed if self.pose_state is not None else 0.0
        return IpsEstimate(fix[0], fix[1], pose, speed, stepped, diverged)

    def replay(self, records, heading=0.0):
        """
        Run recorded (tick, accel, readings) records through the pipeline.

        Logs carry no heading; steps move particles along the heading of the
        latest pose estimate, starting from heading.

        Returns:
            List of (tick, IpsEstimate).
        """
        results = []
        for tick, accel, readings in records:
            estimate = self.step(accel, heading, readings)
            if estimate.pose is not None:
                heading = estimate.pose.omega
            results.append((tick, estimate))
        return results


def load_replay_log(path):
    """
    Parse an RSS/IMU replay log.

    One record per line: "tick, accel_mps2, beacon_id:rss_dbm, ..."
    (commas or whitespace), ticks non-decreasing. Lines starting with '#'
    are comments.

    Returns:
        List of (tick, accel, [(beacon_id, rss), ...]).
    """
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read replay log {path}: {exc}") from exc
    for number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.replace(",", " ").split()
        try:
            tick = int(fields[0])
            accel = float(fields[1])
            readings = []
            for item in fields[2:]:
                beacon_id, rss = item.split(":")
                readings.append((int(beacon_id), float(rss)))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{path}:{number}: malformed replay record") from exc
        if records and tick < records[-1][0]:
            raise ConfigError(f"{path}:{number}: replay ticks must not decrease")
        records.append((tick, accel, readings))
    return records
