"""Distributed cognitive MAC: channel state tables, channel scoring, the
RTS/CTS/CRTS handshake, backup reservation and the credential gate.

Nodes here are pure state machines.  They never schedule anything
themselves: the simulator hands them sensing snapshots and incoming
messages and dispatches whatever messages they return.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

_EPS = 1e-9


class Occupancy(enum.Enum):
    FREE = "free"
    PU = "pu"
    SU = "su"


# --------------------------------------------------------------------------
# channel state table


@dataclass
class ChannelRecord:
    """One row of a node's channel state table.

    ``release_at`` is the absolute time a secondary-user reservation ends;
    it is ``None`` while the channel is free or held by a primary user
    (primaries send no control messages, so there is nothing to time).
    """

    channel_id: int
    rate: float
    pkt_size: int
    threshold: float = 0.3
    status: str = "free"
    release_at: float | None = None
    pu_held: bool = False
    u_t: float = 0.0

    def release_timer(self, now: float) -> float | None:
        if self.release_at is None:
            return None
        return max(0.0, self.release_at - now)

    def refresh(self, now: float) -> None:
        if self.status == "busy" and self.release_at is not None and self.release_at <= now:
            self.status, self.release_at = "free", None

    def is_free(self, now: float) -> bool:
        self.refresh(now)
        return self.status == "free"


class ChannelStateTable:
    def __init__(self, records: Iterable[ChannelRecord]):
        self.records: dict[int, ChannelRecord] = {r.channel_id: r for r in records}

    def __getitem__(self, channel: int) -> ChannelRecord:
        return self.records[channel]

    def __iter__(self):
        return iter(self.records.values())

    def free_channels(self, now: float) -> list[int]:
        return [c for c, r in self.records.items() if r.is_free(now)]

    def reserve(self, channel: int, duration: float, now: float) -> None:
        """Mark ``channel`` busy for ``duration`` seconds (CRTS overheard)."""
        rec = self.records[channel]
        rec.refresh(now)
        if rec.pu_held:
            return
        end = now + duration
        rec.status = "busy"
        rec.release_at = end if rec.release_at is None else max(rec.release_at, end)


def update_cst(
    table: ChannelStateTable, snapshot: Mapping[int, Occupancy], now: float
) -> ChannelStateTable:
    """Fold one sensing snapshot into ``table``.

    free -> busy by a secondary user starts a pkt_size/rate timer, free ->
    busy by a primary marks the channel busy without a timer, busy -> free
    clears the timer.  A channel that is already busy and still sensed busy
    keeps its running timer.
    """
    if set(snapshot) != set(table.records):
        raise ValueError("sensing snapshot must cover every channel in the table")
    for ch, occ in snapshot.items():
        rec = table.records[ch]
        rec.refresh(now)
        if occ is Occupancy.PU:
            rec.status, rec.release_at, rec.pu_held = "busy", None, True
        elif occ is Occupancy.SU:
            if rec.status == "free":
                rec.status, rec.release_at = "busy", now + rec.pkt_size / rec.rate
            rec.pu_held = False
        else:
            rec.status, rec.release_at, rec.pu_held = "free", None, False
    return table


# --------------------------------------------------------------------------
# CETP scoring


@dataclass(frozen=True)
class CetpParams:
    """Scoring parameters.

    ``mode="canonical"`` converts the slot budget into bits through the
    channel rate and subtracts ``lc`` control-overhead bits;
    ``mode="literal"`` evaluates floor(beta * (slots - lc / pkt_size)).
    """

    alpha: float = 0.5
    beta: float = 1.0
    lc: float = 2000.0
    slot_duration: float = 1e-3
    max_slots: int = 20
    mode: str = "canonical"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0 or self.lc < 0 or self.slot_duration <= 0 or self.max_slots < 0:
            raise ValueError("invalid CETP parameters")
        if self.mode not in ("canonical", "literal"):
            raise ValueError("mode must be 'canonical' or 'literal'")


def ewma_utilization(u_prev: float, u_hat: float, alpha: float) -> float:
    for name, v in (("u_prev", u_prev), ("u_hat", u_hat), ("alpha", alpha)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    return alpha * u_prev + (1.0 - alpha) * u_hat


def _slot_ok(u_t: float, threshold: float, s: int) -> bool:
    return 1.0 - (1.0 - u_t) ** s < threshold


def slot_count_bruteforce(u_t: float, threshold: float, max_slots: int) -> int:
    """Largest s in [0, max_slots] with 1 - (1 - u_t)^s < threshold, by search."""
    return max(s for s in range(max_slots + 1) if _slot_ok(u_t, threshold, s))


@lru_cache(maxsize=65536)
def slot_count(u_t: float, threshold: float, max_slots: int) -> int:
    """Largest slot count whose busy probability stays under ``threshold``.

    Closed form s = ceil(ln(1 - thr) / ln(1 - u)) - 1, then nudged by one
    step where floating point puts the log ratio on the wrong side of an
    integer, so the result agrees with the direct inequality exactly.
    """
    if not 0.0 <= u_t <= 1.0:
        raise ValueError("u_t must lie in [0, 1]")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if max_slots <= 0:
        return 0
    if u_t == 0.0:
        return max_slots
    if u_t == 1.0:
        return 0
    ratio = math.log1p(-threshold) / math.log1p(-u_t)
    if ratio >= max_slots + 1:
        s = max_slots
    else:
        s = max(0, math.ceil(ratio) - 1)
    while s < max_slots and _slot_ok(u_t, threshold, s + 1):
        s += 1
    while s > 0 and not _slot_ok(u_t, threshold, s):
        s -= 1
    return min(s, max_slots)


def pkt_num(channel: ChannelRecord, slots: int, params: CetpParams) -> int:
    """Packets a channel can carry in ``slots`` slots, never negative."""
    if slots < 0:
        raise ValueError("slots must be >= 0")
    if params.mode == "literal":
        value = params.beta * (slots - params.lc / channel.pkt_size)
    else:
        budget_bits = slots * params.slot_duration * channel.rate
        value = params.beta * (budget_bits - params.lc) / channel.pkt_size
    return max(0, math.floor(value + _EPS))


def channel_pkt_num(rec: ChannelRecord, params: CetpParams) -> int:
    return pkt_num(rec, slot_count(rec.u_t, rec.threshold, params.max_slots), params)


@dataclass(frozen=True)
class Candidate:
    channel: int
    pkt_tran: int
    pkt_recv: int
    rate: float

    @property
    def score(self) -> int:
        return min(self.pkt_tran, self.pkt_recv)


@dataclass(frozen=True)
class Selection:
    channel: int
    max_pkt_num: int


def _ranked(overlap: Sequence[Candidate]) -> list[Candidate]:
    return sorted((c for c in overlap if c.score > 0), key=lambda c: (-c.score, -c.rate))


def select_channel(overlap: Sequence[Candidate], rng: np.random.Generator) -> Selection | None:
    """Max-min packet count, ties by higher rate, remaining ties at random."""
    ranked = _ranked(overlap)
    if not ranked:
        return None
    top = ranked[0]
    tied = [c for c in ranked if c.score == top.score and c.rate == top.rate]
    pick = tied[int(rng.integers(len(tied)))] if len(tied) > 1 else top
    return Selection(pick.channel, pick.score)


def select_random(overlap: Sequence[Candidate], rng: np.random.Generator) -> Selection | None:
    """Uniform choice among usable channels (baseline for CETP)."""
    usable = [c for c in overlap if c.score > 0]
    if not usable:
        return None
    pick = usable[int(rng.integers(len(usable)))]
    return Selection(pick.channel, pick.score)


def reserve_backup(overlap: Sequence[Candidate], selected: int) -> int | None:
    """Runner-up channel under the same scoring, or None."""
    rest = _ranked([c for c in overlap if c.channel != selected])
    return rest[0].channel if rest else None


# --------------------------------------------------------------------------
# security gate


@dataclass(frozen=True)
class Credential:
    node_id: int
    token: bytes
    valid_until: float


class CredentialRegistry:
    """Keyed-hash tokens standing in for signature-based node authentication."""

    def __init__(self, secret: bytes):
        self._secret = bytes(secret)
        self.enrolled: set[int] = set()

    def enroll(self, node_id: int) -> None:
        self.enrolled.add(node_id)

    def revoke(self, node_id: int) -> None:
        self.enrolled.discard(node_id)

    def token(self, node_id: int, valid_until: float) -> bytes:
        msg = f"{node_id}|{valid_until!r}".encode()
        return hmac.new(self._secret, msg, hashlib.sha256).digest()

    def issue(self, node_id: int, valid_until: float) -> Credential:
        if node_id not in self.enrolled:
            raise KeyError(f"node {node_id} is not enrolled")
        return Credential(node_id, self.token(node_id, valid_until), valid_until)


def authenticate(node_id: int, credential: Credential | None, registry: CredentialRegistry, now: float) -> bool:
    if credential is None or credential.node_id != node_id:
        return False
    if node_id not in registry.enrolled or now > credential.valid_until:
        return False
    expected = registry.token(node_id, credential.valid_until)
    return hmac.compare_digest(expected, credential.token)


def derive_switch_pattern(shared_secret: bytes, free_band_count: int, seed: int) -> list[int]:
    """Pseudorandom hop order over the free sub-bands, reproducible from the secret."""
    if free_band_count < 0:
        raise ValueError("free_band_count must be >= 0")
    digest = hashlib.sha256(bytes(shared_secret) + int(seed).to_bytes(8, "big", signed=True)).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "big"))
    return [int(i) for i in rng.permutation(free_band_count)]


# --------------------------------------------------------------------------
# control messages and the handshake


@dataclass(frozen=True)
class ControlMessage:
    variant: str  # "RTS", "CTS" or "CRTS"
    sender: int
    receiver: int
    free_list: tuple[int, ...] = ()
    pkt_nums: tuple[int, ...] = ()  # transmitter pkt_num per free_list entry
    channel: int | None = None
    max_pkt_num: int | None = None
    backup: int | None = None
    duration: float | None = None
    credential: Credential | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in ("RTS", "CTS", "CRTS"):
            raise ValueError(f"unknown control message {self.variant!r}")
        if self.variant == "CTS" and (self.max_pkt_num is None or self.max_pkt_num < 1):
            raise ValueError("a CTS must grant at least one packet")


class LinkState(enum.Enum):
    IDLE = "idle"
    AWAITING_CTS = "awaiting-cts"
    CONFIRMING = "confirming"
    TRANSMITTING = "transmitting"


class MacNode:
    """One secondary user running the channel endorsement handshake."""

    def __init__(
        self,
        node_id: int,
        table: ChannelStateTable,
        params: CetpParams,
        credential: Credential | None = None,
        selection: str = "cetp",
    ):
        if selection not in ("cetp", "random"):
            raise ValueError("selection must be 'cetp' or 'random'")
        self.node_id = node_id
        self.table = table
        self.params = params
        self.credential = credential
        self.selection = selection
        self.state = LinkState.IDLE
        self.peer: int | None = None
        self.channel: int | None = None
        self.max_pkt_num = 0
        self.backup: int | None = None
        self.auth_rejections = 0
        self.ignored = 0

    def _ignore(self, what: str) -> None:
        self.ignored += 1
        log.debug("node %d ignored %s in state %s", self.node_id, what, self.state.value)

    def reset(self) -> None:
        self.state = LinkState.IDLE
        self.peer = self.channel = self.backup = None
        self.max_pkt_num = 0

    def pkt_nums(self, channels: Iterable[int]) -> dict[int, int]:
        return {c: channel_pkt_num(self.table[c], self.params) for c in channels}

    def on_link_request(
        self,
        now: float,
        peer: int,
        snapshot: Mapping[int, Occupancy],
        usable: Iterable[int] | None = None,
    ) -> ControlMessage | None:
        """Sense, then build an RTS listing usable free channels.

        Returns None (and stays idle) when no channel qualifies.
        """
        if self.state is not LinkState.IDLE:
            self._ignore("link request")
            return None
        update_cst(self.table, snapshot, now)
        free = self.table.free_channels(now)
        if usable is not None:
            allowed = set(usable)
            free = [c for c in free if c in allowed]
        nums = self.pkt_nums(free)
        free = [c for c in free if nums[c] > 0]
        if not free:
            return None
        self.state, self.peer = LinkState.AWAITING_CTS, peer
        return ControlMessage(
            "RTS",
            self.node_id,
            peer,
            free_list=tuple(free),
            pkt_nums=tuple(nums[c] for c in free),
            credential=self.credential,
        )

    def on_rts(
        self,
        now: float,
        msg: ControlMessage,
        snapshot: Mapping[int, Occupancy],
        registry: CredentialRegistry,
        rng: np.random.Generator,
    ) -> ControlMessage | None:
        """Authenticate, sense, score the overlap and answer with a CTS or silence."""
        if msg.variant != "RTS" or msg.receiver != self.node_id:
            self._ignore(msg.variant)
            return None
        if not authenticate(msg.sender, msg.credential, registry, now):
            self.auth_rejections += 1
            return None
        if self.state is not LinkState.IDLE:
            self._ignore("RTS")
            return None
        update_cst(self.table, snapshot, now)
        mine = set(self.table.free_channels(now))
        recv = self.pkt_nums(mine)
        overlap = [
            Candidate(c, n, recv[c], self.table[c].rate)
            for c, n in zip(msg.free_list, msg.pkt_nums)
            if c in mine
        ]
        choose = select_channel if self.selection == "cetp" else select_random
        sel = choose(overlap, rng)
        if sel is None:
            return None
        self.state, self.peer = LinkState.CONFIRMING, msg.sender
        self.channel, self.max_pkt_num = sel.channel, sel.max_pkt_num
        self.backup = reserve_backup(overlap, sel.channel)
        return ControlMessage(
            "CTS",
            self.node_id,
            msg.sender,
            channel=sel.channel,
            max_pkt_num=sel.max_pkt_num,
            backup=self.backup,
        )

    def on_cts(self, now: float, msg: ControlMessage, snapshot: Mapping[int, Occupancy]) -> ControlMessage | None:
        """Confirm with a CRTS, or abort (return None, go idle) if the channel went busy."""
        if msg.variant != "CTS" or self.state is not LinkState.AWAITING_CTS or msg.sender != self.peer:
            self._ignore(msg.variant)
            return None
        update_cst(self.table, snapshot, now)
        if not self.table[msg.channel].is_free(now):
            self.reset()
            return None
        rec = self.table[msg.channel]
        duration = msg.max_pkt_num * rec.pkt_size / rec.rate
        backup = msg.backup
        if backup is not None and not self.table[backup].is_free(now):
            backup = None
        self.state = LinkState.TRANSMITTING
        self.channel, self.max_pkt_num, self.backup = msg.channel, msg.max_pkt_num, backup
        return ControlMessage(
            "CRTS",
            self.node_id,
            msg.sender,
            channel=msg.channel,
            max_pkt_num=msg.max_pkt_num,
            backup=backup,
            duration=duration,
        )

    def on_crts(self, now: float, msg: ControlMessage) -> None:
        """Receiver starts the link; every other node books the channel."""
        if msg.variant != "CRTS":
            self._ignore(msg.variant)
            return
        if msg.sender == self.node_id:
            return
        if msg.receiver == self.node_id:
            if self.state is LinkState.CONFIRMING and self.peer == msg.sender and self.channel == msg.channel:
                self.state = LinkState.TRANSMITTING
                self.backup = msg.backup
            else:
                self._ignore("CRTS")
            return
        self.table.reserve(msg.channel, msg.duration, now)

    def on_cts_timeout(self, now: float) -> bool:
        """Return to idle if still waiting; False if the timer was stale."""
        if self.state is not LinkState.AWAITING_CTS:
            return False
        self.reset()
        return True

    def on_confirm_timeout(self, now: float) -> bool:
        if self.state is not LinkState.CONFIRMING:
            return False
        self.reset()
        return True
