"""Discrete-event cross-layer simulator.

The CR manager pipeline for every secondary link request is

    authenticate -> sense -> power limits / link quality -> CETP handshake
    -> grant -> transmit (with backup switching on primary-user return)

Primary users toggle per channel as independent on/off processes with
exponential holding times.  Secondary traffic is a Poisson packet stream per
transmitter/receiver pair.  All randomness comes from child streams of one
seed, one stream per concern, so changing the selection policy does not
perturb the primary-user activity: runs with the same seed are paired.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from . import mac
from .ddce import TrialConfig, run_ser_trial
from .transforms import MultCounter

SCHEMA_VERSION = 1

EVENT_KINDS = (
    "pu_on",
    "pu_off",
    "su_arrival",
    "msg_delivery",
    "timer_expiry",
    "reauth",
    "sense",
    "rogue",
)


@dataclass(frozen=True)
class Scenario:
    """Simulation inputs.  Defaults follow the full 600 MHz / 100 channel setup."""

    n_channels: int = 100
    channel_bw: float = 6e6
    band: float = 600e6
    n_pu: int = 100
    n_su_pairs: int = 4
    n_rogue: int = 0
    pu_mean_on: float = 0.5
    pu_duty_min: float = 0.05
    pu_duty_max: float = 0.8
    traffic_rate: float = 2000.0
    snr_db: float = 22.0
    link_snr_db: tuple = ()
    shadowing_db: float = 3.0
    rates: tuple = (3e6, 6e6, 9e6, 12e6)
    pkt_size: int = 8000
    threshold: float = 0.3
    duration: float = 10.0
    seed: int = 1
    selection: str = "cetp"
    power_control: bool = True
    alpha: float = 0.5
    beta: float = 1.0
    lc: float = 2000.0
    slot_duration: float = 1e-3
    max_slots: int = 20
    eq3_mode: str = "canonical"
    ctrl_delay: float = 50e-6
    sense_interval: float = 10e-3
    backoff_base: float = 1e-3
    max_attempts: int = 3
    t_auth: float = 1.0
    rogue_rate: float = 5.0
    p_max: float = 1.0
    leakage: float = 0.01
    mask: float = 0.005
    phy_estimator: str = "cr_mmse"
    phy_frames: int = 2
    fec_fraction: float = 0.02
    ser_max: float = 0.05
    deadline: float = 0.02
    subframe_duration: float = 2e-3
    n_subframes: int = 8

    @classmethod
    def scaled(cls, **overrides) -> "Scenario":
        """Desk-scale variant: 10 channels, 6 primaries, 4 secondary pairs, 10 s."""
        base = dict(n_channels=10, n_pu=6, n_su_pairs=4, duration=10.0)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "Scenario":
        problems = []
        if self.n_channels < 1:
            problems.append("n_channels must be >= 1")
        if self.n_channels * self.channel_bw > self.band * (1 + 1e-12):
            problems.append("n_channels * channel_bw exceeds the band")
        if self.n_pu < 0 or self.n_su_pairs < 0 or self.n_rogue < 0:
            problems.append("node counts must be >= 0")
        if not 0 <= self.pu_duty_min <= self.pu_duty_max <= 1:
            problems.append("need 0 <= pu_duty_min <= pu_duty_max <= 1")
        if self.pu_mean_on <= 0:
            problems.append("pu_mean_on must be > 0")
        if self.duration <= 0 or self.traffic_rate < 0:
            problems.append("duration must be > 0 and traffic_rate >= 0")
        if not self.rates or min(self.rates) <= 0:
            problems.append("rates must be positive")
        if self.pkt_size <= 0:
            problems.append("pkt_size must be > 0")
        if self.selection not in ("cetp", "random"):
            problems.append("selection must be 'cetp' or 'random'")
        if self.link_snr_db and len(self.link_snr_db) != self.n_su_pairs:
            problems.append("link_snr_db needs one entry per pair")
        if not 0 < self.threshold < 1:
            problems.append("threshold must lie in (0, 1)")
        if self.ctrl_delay <= 0 or self.sense_interval <= 0:
            problems.append("ctrl_delay and sense_interval must be > 0")
        if self.max_attempts < 1 or self.t_auth <= 0:
            problems.append("max_attempts must be >= 1 and t_auth > 0")
        if self.p_max <= 0 or self.leakage < 0 or self.mask < 0:
            problems.append("power parameters must be non-negative with p_max > 0")
        try:
            self.cetp_params()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ValueError("invalid scenario: " + "; ".join(problems))
        return self

    def cetp_params(self) -> mac.CetpParams:
        return mac.CetpParams(
            alpha=self.alpha,
            beta=self.beta,
            lc=self.lc,
            slot_duration=self.slot_duration,
            max_slots=self.max_slots,
            mode=self.eq3_mode,
        )

    def pair_snr_db(self, pair: int) -> float:
        return float(self.link_snr_db[pair]) if self.link_snr_db else float(self.snr_db)

    def config_hash(self) -> str:
        text = repr(sorted(dataclasses.asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _coerce(value: str, default: Any):
    value = value.strip()
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(",") if v.strip())
    return value


def scenario_from_mapping(values: dict[str, str], base: Scenario | None = None) -> Scenario:
    base = Scenario() if base is None else base
    defaults = dataclasses.asdict(base)
    unknown = set(values) - set(defaults)
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    changes = {k: _coerce(v, defaults[k]) for k, v in values.items()}
    return base.replace(**changes).validate()


def read_config(path: str | Path) -> configparser.ConfigParser:
    """Parse an INI config and check ``[meta] schema_version``."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValueError(f"cannot read config file {path}")
    version = parser.get("meta", "schema_version", fallback=None)
    if version is None or int(version) != SCHEMA_VERSION:
        raise ValueError(f"config needs [meta] schema_version = {SCHEMA_VERSION}")
    return parser


def load_scenario(path: str | Path, base: Scenario | None = None) -> Scenario:
    """Scenario from the ``[scenario]`` section of an INI config.

    Keys are :class:`Scenario` field names; tuples are comma separated.
    A missing section leaves ``base`` unchanged.
    """
    parser = read_config(path)
    values = dict(parser.items("scenario")) if parser.has_section("scenario") else {}
    return scenario_from_mapping(values, base)


# --------------------------------------------------------------------------
# event queue


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap ordered by (time, insertion sequence)."""

    def __init__(self):
        self._heap: list[Event] = []
        self._seq = 0
        self.now = 0.0

    def push(self, time: float, kind: str, payload: Any = None) -> Event:
        if time < self.now:
            raise ValueError(f"event {kind} at {time} scheduled in the past (now={self.now})")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        ev = Event(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def peek_time(self) -> float:
        return self._heap[0].time if self._heap else math.inf

    def __len__(self):
        return len(self._heap)


# --------------------------------------------------------------------------
# PHY coupling and power control


@lru_cache(maxsize=4096)
def phy_point(snr_db: float, estimator: str = "cr_mmse", frames: int = 2, seed: int = 0):
    """Monte-Carlo DDCE symbol error rate and estimator cost at one SNR (memoised).

    Returns ``(ser, counter)`` where ``counter`` totals the estimator work
    over all simulated frames.
    """
    counter = MultCounter()
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0, counter
    cfg = TrialConfig(sigma_w_sq=10.0 ** (-snr_db / 10.0))
    errors = symbols = 0
    for f in range(frames):
        res = run_ser_trial(cfg, estimator, np.random.default_rng([seed, f]))
        errors += res.symbol_errors
        symbols += res.symbols
        counter.merge(res.counter)
    return errors / symbols, counter


def phy_ser(snr_db: float, estimator: str = "cr_mmse", frames: int = 2, seed: int = 0) -> float:
    return phy_point(snr_db, estimator, frames, seed)[0]


def packet_error_rate(ser: float, symbols_per_packet: int, fec_fraction: float) -> float:
    """P(more than fec_fraction * n symbol errors in an n-symbol packet)."""
    if ser <= 0:
        return 0.0
    t = math.floor(fec_fraction * symbols_per_packet)
    return float(stats.binom.sf(t, symbols_per_packet, ser))


def power_limit(
    channel: int,
    pu_interference_map: dict[int, float],
    p_max: float,
    mask: float,
    leakage: float,
) -> float:
    """Transmit power cap on ``channel``.

    ``pu_interference_map`` maps channels with an active primary user to the
    interference already reaching that primary.  Leakage into each adjacent
    protected channel must keep it at or below ``mask``.  A cap of 0 marks
    the channel unusable.
    """
    cap = p_max
    for nb in (channel - 1, channel + 1):
        if nb in pu_interference_map:
            headroom = mask - pu_interference_map[nb]
            if headroom <= 0:
                return 0.0
            if leakage > 0:
                cap = min(cap, headroom / leakage)
    return max(0.0, cap)


def link_snr_db(base_snr_db: float, cap: float, p_max: float) -> float:
    if cap <= 0:
        return -math.inf
    return base_snr_db + 10.0 * math.log10(cap / p_max)


# --------------------------------------------------------------------------
# sub-frame scheduling


@dataclass(frozen=True)
class ScheduleRequest:
    link_id: int
    deadline: float
    packets: int | None = None  # None = backlogged


@dataclass
class SubframeSchedule:
    frames: list[list[tuple[int, ...]]]
    power: list[list[dict[int, float]]]
    denied: list[int]


def subframe_schedule(
    requests,
    n_subframes: int,
    subframe_duration: float,
    n_frames: int = 1,
    per_subframe: int = 1,
    power_budget: float = 1.0,
) -> SubframeSchedule:
    """Assign delay classes to sub-frames.

    Requests sharing a deadline form one class.  Each frame walks the
    classes round robin, starting from the tightest deadline, and gives
    each sub-frame to the next class that still has packets and whose
    deadline the sub-frame meets.  All links of the chosen class share the
    sub-frame and split ``power_budget`` evenly.  A deadline shorter than
    one sub-frame can never be met and the request is denied.
    """
    denied = [r.link_id for r in requests if r.deadline < subframe_duration]
    live = [r for r in requests if r.deadline >= subframe_duration]
    classes: dict[float, list[ScheduleRequest]] = {}
    for r in sorted(live, key=lambda r: (r.deadline, r.link_id)):
        classes.setdefault(r.deadline, []).append(r)
    order = sorted(classes)
    left = {r.link_id: (math.inf if r.packets is None else r.packets) for r in live}

    frames, power = [], []
    for _ in range(n_frames):
        pointer = 0
        slots, groups = [], []
        for j in range(n_subframes):
            end = (j + 1) * subframe_duration
            chosen = None
            for step in range(len(order)):
                d = order[(pointer + step) % len(order)]
                if d + 1e-12 >= end and any(left[r.link_id] > 0 for r in classes[d]):
                    chosen = (pointer + step) % len(order)
                    break
            if chosen is None:
                slots.append(())
                groups.append({})
                continue
            links = tuple(r.link_id for r in classes[order[chosen]] if left[r.link_id] > 0)
            for lid in links:
                left[lid] -= per_subframe
            slots.append(links)
            groups.append({lid: power_budget / len(links) for lid in links})
            pointer = chosen + 1
        frames.append(slots)
        power.append(groups)
    return SubframeSchedule(frames, power, denied)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    n_channels: int
    duration: float
    pkt_size: int
    tx_packets: np.ndarray = None
    rx_packets: np.ndarray = None
    link_delivered: np.ndarray = None
    grant_snr_db: list = field(default_factory=list)
    grants: int = 0
    auth_rejections: int = 0
    forced_terminations: int = 0
    backup_switches: int = 0
    pu_arrivals_during_tx: int = 0
    failed_requests: int = 0
    denied_requests: int = 0
    cts_timeouts: int = 0
    aborted_confirms: int = 0
    mask_violations: int = 0
    cts_sent: int = 0
    ser_points: dict = field(default_factory=dict)
    complexity: MultCounter = field(default_factory=MultCounter)
    violations: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def ratio(self) -> np.ndarray:
        tx = self.tx_packets
        return np.divide(self.rx_packets, tx, out=np.zeros(tx.size), where=tx > 0)

    @property
    def channel_throughput(self) -> np.ndarray:
        return self.rx_packets * self.pkt_size / self.duration

    @property
    def link_throughput(self) -> np.ndarray:
        return self.link_delivered * self.pkt_size / self.duration

    @property
    def throughput(self) -> float:
        return float(self.rx_packets.sum() * self.pkt_size / self.duration)


TRACE_COLUMNS = ("time", "variant", "sender", "receiver", "channel", "pkt_num", "backup")


# --------------------------------------------------------------------------
# simulator


@dataclass
class _Link:
    pair: int
    channel: int
    backup: int | None
    power: float
    per: float
    pkt_time: float
    seg_start: float
    seg_packets: int
    version: int


class Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = sc = scenario.validate()
        seeds = np.random.SeedSequence(sc.seed).spawn(6)
        setup, self.rng_pu, self.rng_traffic, self.rng_mac, self.rng_phy, self.rng_rogue = (
            np.random.default_rng(s) for s in seeds
        )
        C = sc.n_channels
        self.rates = setup.choice(np.asarray(sc.rates, dtype=float), size=C)
        self.pu_channel = (
            setup.permutation(C)[: sc.n_pu] if sc.n_pu <= C else np.arange(sc.n_pu) % C
        )
        self.pu_duty = setup.uniform(sc.pu_duty_min, sc.pu_duty_max, size=sc.n_pu)
        self.shadow = setup.normal(0.0, sc.shadowing_db, size=(sc.n_su_pairs, C))
        self.arrivals = [
            np.cumsum(
                self.rng_traffic.exponential(
                    1.0 / sc.traffic_rate, size=int(sc.traffic_rate * sc.duration * 1.5) + 64
                )
            )
            if sc.traffic_rate > 0
            else np.array([math.inf])
            for _ in range(sc.n_su_pairs)
        ]
        self.dequeued = np.zeros(sc.n_su_pairs, dtype=np.int64)

        self.registry = mac.CredentialRegistry(hashlib.sha256(f"crn-{sc.seed}".encode()).digest())
        params = sc.cetp_params()
        self.nodes: dict[int, mac.MacNode] = {}
        for node in range(2 * sc.n_su_pairs):
            self.registry.enroll(node)
            table = mac.ChannelStateTable(
                mac.ChannelRecord(c, float(self.rates[c]), sc.pkt_size, sc.threshold)
                for c in range(C)
            )
            self.nodes[node] = mac.MacNode(
                node, table, params, self.registry.issue(node, sc.t_auth), sc.selection
            )
        self.rogues = list(range(2 * sc.n_su_pairs, 2 * sc.n_su_pairs + sc.n_rogue))

        self.q = EventQueue()
        self.pu_on = np.zeros(C, dtype=int)
        self.su_link: list[int | None] = [None] * C
        self.busy_acc = np.zeros(C)
        self.busy_since = np.full(C, np.nan)
        self.busy_mark = np.zeros(C)
        self.links: dict[int, _Link] = {}
        self.attempts = np.zeros(sc.n_su_pairs, dtype=int)
        self.handshake = np.zeros(sc.n_su_pairs, dtype=int)
        self.waiting = set()  # pairs blocked on an empty queue
        self.ctrl_free_at = 0.0
        self.m = Metrics(
            C,
            sc.duration,
            sc.pkt_size,
            tx_packets=np.zeros(C, dtype=np.int64),
            rx_packets=np.zeros(C, dtype=np.int64),
            link_delivered=np.zeros(sc.n_su_pairs, dtype=np.int64),
        )
        self.denied: set[int] = set()
        self.pu_log: list[tuple[float, int, bool]] = []
        self._per_cache: dict[float, float] = {}
        self._quality_cache: dict[tuple, bool] = {}

    # ---- ground truth helpers

    def _update_busy(self, c: int, now: float) -> None:
        busy = self.pu_on[c] > 0 or self.su_link[c] is not None
        if busy and np.isnan(self.busy_since[c]):
            self.busy_since[c] = now
        elif not busy and not np.isnan(self.busy_since[c]):
            self.busy_acc[c] += now - self.busy_since[c]
            self.busy_since[c] = np.nan

    def _busy_total(self, now: float) -> np.ndarray:
        open_ = np.where(np.isnan(self.busy_since), 0.0, now - np.nan_to_num(self.busy_since))
        return self.busy_acc + open_

    def snapshot(self) -> dict[int, mac.Occupancy]:
        snap = {}
        for c in range(self.sc.n_channels):
            if self.pu_on[c] > 0:
                snap[c] = mac.Occupancy.PU
            elif self.su_link[c] is not None:
                snap[c] = mac.Occupancy.SU
            else:
                snap[c] = mac.Occupancy.FREE
        return snap

    def _interference_map(self) -> dict[int, float]:
        imap = {}
        for c in np.flatnonzero(self.pu_on > 0):
            c = int(c)
            total = 0.0
            for nb in (c - 1, c + 1):
                if 0 <= nb < self.sc.n_channels and self.su_link[nb] is not None:
                    total += self.sc.leakage * self.links[self.su_link[nb]].power
            imap[c] = total
        return imap

    def _cap(self, channel: int, imap: dict[int, float]) -> float:
        sc = self.sc
        if not sc.power_control:
            return sc.p_max
        return power_limit(channel, imap, sc.p_max, sc.mask, sc.leakage)

    def _ser(self, snr_db: float) -> float:
        if math.isinf(snr_db):
            return 0.0 if snr_db > 0 else 1.0
        key = float(round(snr_db))
        if key not in self.m.ser_points:
            ser, counter = phy_point(key, self.sc.phy_estimator, self.sc.phy_frames, self.sc.seed)
            self.m.ser_points[key] = ser
            self.m.complexity.merge(counter)
        return self.m.ser_points[key]

    def _per(self, snr_db: float) -> float:
        key = float(round(snr_db)) if math.isfinite(snr_db) else snr_db
        if key not in self._per_cache:
            self._per_cache[key] = packet_error_rate(self._ser(snr_db), self.sc.pkt_size, self.sc.fec_fraction)
        return self._per_cache[key]

    def _usable(self, pair: int, imap: dict[int, float]) -> list[int]:
        sc = self.sc
        usable = []
        for c in range(sc.n_channels):
            cap = self._cap(c, imap)
            if cap <= 0:
                continue
            if sc.power_control:
                key = (pair, c, cap)
                ok = self._quality_cache.get(key)
                if ok is None:
                    snr = link_snr_db(sc.pair_snr_db(pair) + self.shadow[pair, c], cap, sc.p_max)
                    ok = self._quality_cache[key] = self._ser(snr) <= sc.ser_max
                if not ok:
                    continue
            usable.append(c)
        return usable

    def queue_len(self, pair: int, now: float) -> int:
        arrived = int(np.searchsorted(self.arrivals[pair], now, side="right"))
        return arrived - int(self.dequeued[pair])

    # ---- control channel

    def _send(self, msg: mac.ControlMessage, now: float) -> float:
        start = max(now, self.ctrl_free_at)
        deliver = start + self.sc.ctrl_delay
        self.ctrl_free_at = deliver
        if msg.variant == "RTS":
            channel = ";".join(str(c) for c in msg.free_list)
        else:
            channel = "" if msg.channel is None else str(msg.channel)
        self.m.trace.append(
            (
                repr(float(start)),
                msg.variant,
                str(msg.sender),
                str(msg.receiver),
                channel,
                "" if msg.max_pkt_num is None else str(msg.max_pkt_num),
                "" if msg.backup is None else str(msg.backup),
            )
        )
        self.q.push(deliver, "msg_delivery", msg)
        return start

    @property
    def cts_timeout(self) -> float:
        return 2.0 * (2.0 * self.sc.ctrl_delay) + 1e-6

    # ---- link request pipeline

    def _backoff(self, pair: int, now: float) -> None:
        self.attempts[pair] += 1
        if self.attempts[pair] >= self.sc.max_attempts:
            self.m.failed_requests += 1
            self.attempts[pair] = 0
        window = self.sc.backoff_base * 2.0 ** self.attempts[pair]
        delay = self.sc.backoff_base + window * self.rng_mac.random()
        self.q.push(now + delay, "timer_expiry", ("request", pair))

    def _request(self, pair: int, now: float) -> None:
        if pair in self.denied or pair in self.links:
            return
        a, b = 2 * pair, 2 * pair + 1
        node_a = self.nodes[a]
        if node_a.state is not mac.LinkState.IDLE or self.nodes[b].state is not mac.LinkState.IDLE:
            return
        if self.queue_len(pair, now) <= 0:
            nxt = self.arrivals[pair][self.dequeued[pair]] if self.dequeued[pair] < self.arrivals[pair].size else math.inf
            if nxt <= self.sc.duration and pair not in self.waiting:
                self.waiting.add(pair)
                self.q.push(max(nxt, now), "su_arrival", pair)
            return
        if not mac.authenticate(a, node_a.credential, self.registry, now):
            return  # retried at the next re-authentication
        imap = self._interference_map()
        rts = node_a.on_link_request(now, b, self.snapshot(), self._usable(pair, imap))
        if rts is None:
            self._backoff(pair, now)
            return
        self.handshake[pair] += 1
        start = self._send(rts, now)
        self.q.push(start + self.cts_timeout, "timer_expiry", ("cts_timeout", pair, int(self.handshake[pair])))

    def _grant(self, pair: int, crts: mac.ControlMessage, now: float) -> None:
        sc = self.sc
        a, b = 2 * pair, 2 * pair + 1
        c = crts.channel
        # the receiver senses at commit too, as the sender did in on_cts
        mac.update_cst(self.nodes[b].table, self.snapshot(), now)
        # omniscient monitor
        if self.pu_on[c] > 0:
            self.m.violations.append(f"t={now}: grant on PU-occupied channel {c}")
        if self.su_link[c] is not None:
            self.m.violations.append(f"t={now}: grant on channel {c} already carrying a link")
        if not self.nodes[a].table[c].is_free(now) or not self.nodes[b].table[c].is_free(now):
            self.m.violations.append(f"t={now}: channel {c} not free in both tables at grant")
        if not mac.authenticate(a, self.nodes[a].credential, self.registry, now):
            self.m.violations.append(f"t={now}: grant to unauthenticated node {a}")
        imap = self._interference_map()
        power = self._cap(c, imap)
        if not sc.power_control and power_limit(c, imap, sc.p_max, sc.mask, sc.leakage) < power:
            self.m.mask_violations += 1
        snr = link_snr_db(sc.pair_snr_db(pair) + self.shadow[pair, c], power, sc.p_max)
        self.m.grants += 1
        self.m.grant_snr_db.append((pair, snr))
        n = min(crts.max_pkt_num, self.queue_len(pair, now))
        link = _Link(pair, c, crts.backup, power, self._per(snr), sc.pkt_size / self.rates[c], now, n, 0)
        self.links[pair] = link
        self._start_segment(link, now)

    def _start_segment(self, link: _Link, now: float) -> None:
        self.su_link[link.channel] = link.pair
        self._update_busy(link.channel, now)
        link.seg_start = now
        link.version += 1
        self.q.push(now + link.seg_packets * link.pkt_time, "timer_expiry", ("link_end", link.pair, link.version))

    def _account(self, link: _Link, sent: int, lost_inflight: int = 0) -> None:
        c = link.channel
        delivered = int(self.rng_phy.binomial(sent, 1.0 - link.per)) if sent else 0
        self.m.tx_packets[c] += sent + lost_inflight
        self.m.rx_packets[c] += delivered
        self.m.link_delivered[link.pair] += delivered
        self.dequeued[link.pair] += sent

    def _release(self, link: _Link, now: float) -> None:
        self.su_link[link.channel] = None
        self._update_busy(link.channel, now)

    def _finish(self, pair: int, now: float) -> None:
        self.links.pop(pair, None)
        self.nodes[2 * pair].reset()
        self.nodes[2 * pair + 1].reset()
        self.attempts[pair] = 0
        self._request(pair, now)

    def _interrupt(self, link: _Link, now: float) -> None:
        """Primary user returned on the link's channel mid-transmission."""
        sc = self.sc
        self.m.pu_arrivals_during_tx += 1
        elapsed = now - link.seg_start
        done = min(link.seg_packets, int(math.floor(elapsed / link.pkt_time + 1e-9)))
        inflight = 1 if done < link.seg_packets and elapsed > done * link.pkt_time + 1e-12 else 0
        self._account(link, done, inflight)
        self._release(link, now)
        remaining = link.seg_packets - done
        b = link.backup
        link.backup = None
        if b is not None and self.pu_on[b] == 0 and self.su_link[b] is None:
            cap = self._cap(b, self._interference_map())
            if cap > 0:
                self.m.backup_switches += 1
                link.channel, link.power = b, cap
                snr = link_snr_db(sc.pair_snr_db(link.pair) + self.shadow[link.pair, b], cap, sc.p_max)
                link.per = self._per(snr)
                link.pkt_time = sc.pkt_size / self.rates[b]
                link.seg_packets = remaining
                self._start_segment(link, now)
                return
        self.m.forced_terminations += 1
        link.version += 1
        self._finish(link.pair, now)

    # ---- event handlers

    def _on_pu(self, ev: Event, turning_on: bool) -> None:
        now = ev.time
        pu = ev.payload
        c = int(self.pu_channel[pu])
        duty = self.pu_duty[pu]
        self.pu_log.append((now, pu, turning_on))
        if turning_on:
            self.pu_on[c] += 1
            if self.pu_on[c] == 1 and self.su_link[c] is not None:
                self._interrupt(self.links[self.su_link[c]], now)
            self._update_busy(c, now)
            if duty < 1.0:
                self.q.push(now + self.rng_pu.exponential(self.sc.pu_mean_on), "pu_off", pu)
        else:
            self.pu_on[c] -= 1
            self._update_busy(c, now)
            mean_off = self.sc.pu_mean_on * (1.0 - duty) / duty if duty > 0 else math.inf
            if math.isfinite(mean_off):
                self.q.push(now + self.rng_pu.exponential(mean_off), "pu_on", pu)

    def _on_sense(self, now: float) -> None:
        total = self._busy_total(now)
        u_hat = np.clip((total - self.busy_mark) / self.sc.sense_interval, 0.0, 1.0)
        self.busy_mark = total
        alpha = self.sc.alpha
        for node in self.nodes.values():
            for rec in node.table:
                rec.u_t = mac.ewma_utilization(rec.u_t, float(u_hat[rec.channel_id]), alpha)
        nxt = now + self.sc.sense_interval
        if nxt <= self.sc.duration:
            self.q.push(nxt, "sense")

    def _on_delivery(self, msg: mac.ControlMessage, now: float) -> None:
        if msg.variant == "RTS":
            node_b = self.nodes.get(msg.receiver)
            if node_b is None:
                return
            before = node_b.auth_rejections
            cts = node_b.on_rts(now, msg, self.snapshot(), self.registry, self.rng_mac)
            self.m.auth_rejections += node_b.auth_rejections - before
            if cts is not None:
                if cts.max_pkt_num < 1:
                    self.m.violations.append(f"t={now}: CTS with max_pkt_num {cts.max_pkt_num}")
                self.m.cts_sent += 1
                start = self._send(cts, now)
                self.q.push(start + 4 * self.cts_timeout, "timer_expiry", ("confirm_timeout", msg.receiver))
        elif msg.variant == "CTS":
            node_a = self.nodes[msg.receiver]
            waiting = node_a.state is mac.LinkState.AWAITING_CTS and node_a.peer == msg.sender
            crts = node_a.on_cts(now, msg, self.snapshot())
            pair = msg.receiver // 2
            if crts is not None:
                self._grant(pair, crts, now)
                self._send(crts, now)
            elif waiting:
                self._backoff(pair, now)
        else:
            for node in self.nodes.values():
                node.on_crts(now, msg)

    def _on_timer(self, payload, now: float) -> None:
        what = payload[0]
        if what == "request":
            self._request(payload[1], now)
        elif what == "cts_timeout":
            _, pair, token = payload
            if token == self.handshake[pair] and self.nodes[2 * pair].on_cts_timeout(now):
                self.m.cts_timeouts += 1
                self._backoff(pair, now)
        elif what == "confirm_timeout":
            if self.nodes[payload[1]].on_confirm_timeout(now):
                self.m.aborted_confirms += 1
        elif what == "link_end":
            _, pair, version = payload
            link = self.links.get(pair)
            if link is None or link.version != version:
                return
            self._account(link, link.seg_packets)
            self._release(link, now)
            self._finish(pair, now)

    def _on_reauth(self, now: float) -> None:
        for node in self.nodes.values():
            node.credential = self.registry.issue(node.node_id, now + self.sc.t_auth)
        nxt = now + self.sc.t_auth
        if nxt <= self.sc.duration:
            self.q.push(nxt, "reauth")
        for pair in range(self.sc.n_su_pairs):
            self._request(pair, now)

    def _on_rogue(self, rogue: int, now: float) -> None:
        sc = self.sc
        if sc.n_su_pairs:
            target = 2 * int(self.rng_rogue.integers(sc.n_su_pairs)) + 1
            forged = mac.Credential(rogue, self.rng_rogue.bytes(32), now + sc.t_auth)
            channels = tuple(range(sc.n_channels))
            self._send(
                mac.ControlMessage("RTS", rogue, target, channels, (sc.max_slots,) * len(channels), credential=forged),
                now,
            )
        nxt = now + self.rng_rogue.exponential(1.0 / sc.rogue_rate)
        if nxt <= sc.duration:
            self.q.push(nxt, "rogue", rogue)

    # ---- main loop

    def _seed_events(self) -> None:
        sc = self.sc
        for pu in range(sc.n_pu):
            duty = self.pu_duty[pu]
            starts_on = self.rng_pu.random() < duty
            self.q.push(0.0, "pu_on" if starts_on else "pu_off", pu)
            if not starts_on:
                self.pu_on[self.pu_channel[pu]] += 1  # balanced by the pu_off at t=0
        self.q.push(sc.sense_interval, "sense")
        self.q.push(sc.t_auth, "reauth")
        sched = subframe_schedule(
            [mac_request for mac_request in (ScheduleRequest(p, sc.deadline) for p in range(sc.n_su_pairs))],
            sc.n_subframes,
            sc.subframe_duration,
        )
        self.denied = set(sched.denied)
        self.m.denied_requests = len(sched.denied)
        for pair in range(sc.n_su_pairs):
            self.q.push(sc.sense_interval, "timer_expiry", ("request", pair))
        for r in self.rogues:
            self.q.push(self.rng_rogue.exponential(1.0 / sc.rogue_rate), "rogue", r)

    def run(self) -> Metrics:
        sc = self.sc
        self._seed_events()
        while len(self.q) and self.q.peek_time() <= sc.duration:
            ev = self.q.pop()
            now = ev.time
            if ev.kind == "pu_on":
                self._on_pu(ev, True)
            elif ev.kind == "pu_off":
                self._on_pu(ev, False)
            elif ev.kind == "sense":
                self._on_sense(now)
            elif ev.kind == "msg_delivery":
                self._on_delivery(ev.payload, now)
            elif ev.kind == "timer_expiry":
                self._on_timer(ev.payload, now)
            elif ev.kind == "su_arrival":
                self.waiting.discard(ev.payload)
                self._request(ev.payload, now)
            elif ev.kind == "reauth":
                self._on_reauth(now)
            elif ev.kind == "rogue":
                self._on_rogue(ev.payload, now)
        self._close(sc.duration)
        self._check_invariants()
        return self.m

    def _close(self, end: float) -> None:
        for link in list(self.links.values()):
            done = min(link.seg_packets, int(math.floor((end - link.seg_start) / link.pkt_time + 1e-9)))
            self._account(link, done)
        self.q.now = end

    def _check_invariants(self) -> None:
        m = self.m
        if np.any(m.rx_packets > m.tx_packets):
            m.violations.append("rx exceeds tx on some channel")
        if m.rx_packets.sum() != m.link_delivered.sum():
            m.violations.append("per-link deliveries do not add up to channel receptions")
        if m.forced_terminations + m.backup_switches != m.pu_arrivals_during_tx:
            m.violations.append("forced terminations + backup switches != PU arrivals during transmission")


def run(scenario: Scenario) -> Metrics:
    return Simulation(scenario).run()
