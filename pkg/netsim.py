"""
netsim.py

Lossy, delaying single-hop wireless links between the vehicles and the
cloud controller. Time is counted in simulation ticks.

Three channel models decide whether a packet is lost:
  - Bernoulli: independent losses with probability p_loss.
  - Gilbert-Elliott: a good/bad Markov chain with a loss probability per state.
  - Trace-driven: packet k is lost when the recorded RSS minus noise of
    sample k falls below a threshold (traces are cycled).
"""

import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from errors import ConfigError
from sim_logger import global_log

BERNOULLI = "bernoulli"
GILBERT_ELLIOTT = "gilbert_elliott"
TRACE = "trace"
CHANNEL_KINDS = (BERNOULLI, GILBERT_ELLIOTT, TRACE)

GOOD = 0
BAD = 1


@dataclass(frozen=True)
class Packet:
    seq: int
    send_tick: int
    payload: Any
    link_id: str


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = BERNOULLI
    p_loss: float = 0.0
    p_good_to_bad: float = 0.0
    p_bad_to_good: float = 1.0
    loss_good: float = 0.0
    loss_bad: float = 1.0
    trace_path: str = None
    snr_loss_threshold_db: float = 3.0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"channel.kind must be one of {CHANNEL_KINDS}, got {self.kind!r}")
        for name in ("p_loss", "p_good_to_bad", "p_bad_to_good", "loss_good", "loss_bad"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"channel.{name} must be in [0, 1], got {value}")
        if self.kind == TRACE and not self.trace_path:
            raise ConfigError("channel.trace_path is required for trace-driven channels")


@dataclass(frozen=True)
class LinkConfig:
    channel: ChannelConfig = ChannelConfig()
    delay_ticks: int = 1
    jitter_ticks: int = 0
    # None means unlimited.
    max_packets_per_tick: int = None

    def __post_init__(self):
        if int(self.delay_ticks) < 0 or int(self.jitter_ticks) < 0:
            raise ConfigError("link delay_ticks and jitter_ticks must be >= 0")
        if self.max_packets_per_tick is not None and int(self.max_packets_per_tick) < 1:
            raise ConfigError("link max_packets_per_tick must be >= 1 or null")


@dataclass(frozen=True)
class NetworkConfig:
    uplink: LinkConfig = LinkConfig()
    downlink: LinkConfig = LinkConfig()


def load_rss_trace(path):
    """
    Read a trace file with one "rss_dbm noise_dbm" pair per line.

    Blank lines and lines starting with '#' are skipped.

    Returns:
        (rss list, noise list)
    """
    rss, noise = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read RSS trace {path}: {exc}") from exc
    for number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        try:
            if len(fields) != 2:
                raise ValueError("expected two columns")
            rss.append(float(fields[0]))
            noise.append(float(fields[1]))
        except ValueError as exc:
            raise ConfigError(f"{path}:{number}: malformed trace line ({exc})") from exc
    if not rss:
        raise ConfigError(f"RSS trace {path} is empty")
    return rss, noise


class BernoulliChannel:
    def __init__(self, p_loss, rng):
        self.p_loss = p_loss
        self.rng = rng

    def lost(self):
        return bool(self.rng.random() < self.p_loss)


@dataclass(frozen=True)
class GeParams:
    p_good_to_bad: float
    p_bad_to_good: float
    loss_good: float
    loss_bad: float

    def stationary_loss(self):
        """Long-run loss rate of the chain."""
        total = self.p_good_to_bad + self.p_bad_to_good
        if total == 0.0:
            return self.loss_good
        pi_bad = self.p_good_to_bad / total
        return (1.0 - pi_bad) * self.loss_good + pi_bad * self.loss_bad


def ge_step(state, rng, params):
    """
    Markov transition, then a loss draw in the new state.

    Returns:
        (new state, lost)
    """
    if state == GOOD:
        if rng.random() < params.p_good_to_bad:
            state = BAD
    elif rng.random() < params.p_bad_to_good:
        state = GOOD
    p = params.loss_good if state == GOOD else params.loss_bad
    return state, bool(rng.random() < p)


class GilbertElliottChannel:
    def __init__(self, params, rng, state=GOOD):
        self.params = params
        self.rng = rng
        self.state = state

    def lost(self):
        self.state, lost = ge_step(self.state, self.rng, self.params)
        return lost


class TraceDrivenChannel:
    def __init__(self, rss_trace, noise_trace, threshold_db):
        if not rss_trace or len(rss_trace) != len(noise_trace):
            raise ConfigError("RSS and noise traces must be non-empty and of equal length")
        self.rss_trace = list(rss_trace)
        self.noise_trace = list(noise_trace)
        self.threshold_db = threshold_db
        self.index = 0

    def lost_at(self, k):
        k %= len(self.rss_trace)
        return self.rss_trace[k] - self.noise_trace[k] < self.threshold_db

    def lost(self):
        lost = self.lost_at(self.index)
        self.index += 1
        return lost


def build_channel(cfg, rng, base_dir=None):
    """Channel object for a ChannelConfig; trace paths resolve against base_dir."""
    if cfg.kind == BERNOULLI:
        return BernoulliChannel(cfg.p_loss, rng)
    if cfg.kind == GILBERT_ELLIOTT:
        params = GeParams(cfg.p_good_to_bad, cfg.p_bad_to_good, cfg.loss_good, cfg.loss_bad)
        return GilbertElliottChannel(params, rng)
    path = Path(cfg.trace_path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    rss, noise = load_rss_trace(path)
    return TraceDrivenChannel(rss, noise, cfg.snr_loss_threshold_db)


class Link:
    """
    One directed link. Owned by the single-threaded simulation loop.

    Counters satisfy sent == delivered + dropped + in_flight at every tick.
    """

    def __init__(self, link_id, cfg, channel, rng):
        self.link_id = link_id
        self.cfg = cfg
        self.channel = channel
        self.rng = rng
        self.next_seq = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.overflow = 0
        self._queue = []
        self._sent_this_tick = (None, 0)

    @property
    def in_flight(self):
        return len(self._queue)

    def send(self, payload, now_tick):
        """
        Hand a payload to the channel.

        Returns:
            (Packet, lost) where lost tells whether the packet was discarded.
        """
        packet = Packet(self.next_seq, now_tick, payload, self.link_id)
        self.next_seq += 1
        self.sent += 1

        tick, count = self._sent_this_tick
        count = count + 1 if tick == now_tick else 1
        self._sent_this_tick = (now_tick, count)
        cap = self.cfg.max_packets_per_tick
        if cap is not None and count > cap:
            self.dropped += 1
            self.overflow += 1
            return packet, True

        if self.channel.lost():
            self.dropped += 1
            return packet, True
        delay = int(self.cfg.delay_ticks)
        if self.cfg.jitter_ticks > 0:
            delay += int(self.rng.integers(0, int(self.cfg.jitter_ticks) + 1))
        heapq.heappush(self._queue, (now_tick + delay, packet.seq, packet))
        return packet, False

    def poll(self, now_tick):
        """All packets due at or before now_tick, by (delivery tick, seq)."""
        ready = []
        while self._queue and self._queue[0][0] <= now_tick:
            _, _, packet = heapq.heappop(self._queue)
            ready.append(packet)
        self.delivered += len(ready)
        return ready

    def stats(self):
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "in_flight": self.in_flight,
        }


def build_link(link_id, cfg, rng, base_dir=None):
    channel = build_channel(cfg.channel, rng, base_dir)
    global_log(f"[NET] link {link_id}: {cfg.channel.kind}, delay {cfg.delay_ticks}, jitter {cfg.jitter_ticks}")
    return Link(link_id, cfg, channel, rng)
