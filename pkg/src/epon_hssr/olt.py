"""OLT-side MAC: ONU table, HSSR and SS allocators, ranging controller.

Allocators are pure functions of (table snapshot, config, frame index). They
return the frame layout and the new fairness counters; the caller commits the
counters to the table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol

from .core import (
    MIN_PACKET_BYTES,
    NetworkConfig,
    Scheduler,
    SimTime,
    bytes_to_duration,
    duration_to_bytes,
    ranging_window_length,
)
from .onu import GrantRequest, ProtocolError


@dataclass(frozen=True)
class Slot:
    onu_id: int
    offset: SimTime
    length_bytes: int
    duration: SimTime

    @property
    def end(self) -> SimTime:
        return self.offset + self.duration


@dataclass(frozen=True)
class FrameSchedule:
    frame_index: int
    steady_slots: tuple[Slot, ...] = ()
    dynamic_grants: tuple[Slot, ...] = ()
    quiesced: bool = False
    total_guard_count: int = 0
    # New fairness counter per ONU; empty for schedulers that ignore counters.
    counters: Mapping[int, int] = field(default_factory=dict)

    def bursts(self) -> list[Slot]:
        return sorted(self.steady_slots + self.dynamic_grants, key=lambda s: s.offset)

    def check(self, net: NetworkConfig) -> None:
        """Assert frame accounting and pairwise guard separation."""
        busy = sum(s.duration for s in self.steady_slots + self.dynamic_grants)
        if busy + self.total_guard_count * net.guard_time > net.frame_duration:
            raise AssertionError(
                f"frame {self.frame_index}: {busy}ns busy + {self.total_guard_count} guards"
                f" exceeds {net.frame_duration}ns"
            )
        prev: Slot | None = None
        for s in self.bursts():
            if s.offset < 0 or s.end > net.frame_duration:
                raise AssertionError(f"frame {self.frame_index}: {s} outside the frame")
            if prev is not None:
                gap = s.offset - prev.end
                need = net.guard_time if prev.onu_id != s.onu_id else 0
                if gap < need:
                    raise AssertionError(f"frame {self.frame_index}: {prev} and {s} separated by {gap}ns")
            prev = s


@dataclass
class OnuRecord:
    onu_id: int
    subscribed_hp_bytes_per_frame: int
    last_report: GrantRequest | None = None
    counter: int = 0
    ranged: bool = True
    ranging_offset: SimTime = 0

    @property
    def hp_bytes(self) -> int:
        return self.last_report.hp_bytes if self.last_report else 0

    @property
    def be_bytes(self) -> int:
        return self.last_report.be_bytes if self.last_report else 0


class Allocator(Protocol):
    def __call__(
        self, table: Mapping[int, OnuRecord], net: NetworkConfig, frame_index: int, *, quiesce: bool = False
    ) -> FrameSchedule: ...


def steady_layout(onu_ids: list[int], net: NetworkConfig) -> tuple[Slot, ...]:
    """Fixed HSSR steady part: one guard then one slot per ONU, ascending id."""
    length = net.steady_slot_bytes
    dur = bytes_to_duration(length, net.line_rate_bps)
    slots = []
    t = 0
    for oid in sorted(onu_ids):
        t += net.guard_time
        slots.append(Slot(oid, t, length, dur))
        t += dur
    return tuple(slots)


def hssr_allocate(
    table: Mapping[int, OnuRecord], net: NetworkConfig, frame_index: int, *, quiesce: bool = False
) -> FrameSchedule:
    rate = net.line_rate_bps
    gt = net.guard_time
    steady = steady_layout([r.onu_id for r in table.values() if r.ranged], net)
    steady_end = steady[-1].end if steady else 0
    room = net.frame_duration - steady_end
    if room <= gt:
        raise ProtocolError("steady part leaves no dynamic part")
    requesters = sorted(r.onu_id for r in table.values() if r.ranged and r.be_bytes > 0)
    counters = {oid: rec.counter for oid, rec in table.items()}

    grants: list[Slot] = []
    if quiesce or not requesters:
        for oid in requesters:
            counters[oid] += 1
    else:
        need = sum(gt + bytes_to_duration(table[oid].be_bytes, rate) for oid in requesters)
        if need <= room:
            t = steady_end
            for oid in requesters:
                nbytes = table[oid].be_bytes
                dur = bytes_to_duration(nbytes, rate)
                t += gt
                grants.append(Slot(oid, t, nbytes, dur))
                t += dur
                counters[oid] = 0
        else:
            # Overload: fill in order of backlog weighted by (counter + 1). A
            # top-weighted ONU holding a full dynamic part's worth takes it alone.
            order = sorted(requesters, key=lambda oid: (-table[oid].be_bytes * (counters[oid] + 1), oid))
            left = room
            chosen: dict[int, int] = {}
            for oid in order:
                nbytes = min(table[oid].be_bytes, duration_to_bytes(left - gt, rate))
                if nbytes < MIN_PACKET_BYTES:
                    break
                chosen[oid] = nbytes
                left -= gt + bytes_to_duration(nbytes, rate)
            t = steady_end
            for oid in sorted(chosen):
                dur = bytes_to_duration(chosen[oid], rate)
                t += gt
                grants.append(Slot(oid, t, chosen[oid], dur))
                t += dur
            for oid in requesters:
                counters[oid] = 0 if oid in chosen else counters[oid] + 1
    return FrameSchedule(
        frame_index=frame_index,
        steady_slots=steady,
        dynamic_grants=tuple(grants),
        quiesced=quiesce,
        total_guard_count=len(steady) + len(grants),
        counters=counters,
    )


def ss_payload_bytes(n: int, net: NetworkConfig) -> int:
    # One ns per slot reserved for rounding each slot up to whole ns.
    usable = net.frame_duration - n * (net.guard_time + 1)
    return max(duration_to_bytes(usable, net.line_rate_bps) - n * net.report_overhead_bytes, 0)


def ss_slot_sizes(demands: list[int], payload: int) -> list[int]:
    total = sum(demands)
    if total == 0:
        return [0] * len(demands)
    return [min(q, payload * q // total) for q in demands]


def ss_allocate(
    table: Mapping[int, OnuRecord], net: NetworkConfig, frame_index: int, *, quiesce: bool = False
) -> FrameSchedule:
    """Conventional slot-size DBA: one slot per ONU sized by its total backlog.

    Each slot starts with the ONU's report; payload slots are proportional to
    the reported HP+BE bytes, capped at the demand, without redistributing
    the leftover.
    """
    if quiesce:
        raise ProtocolError("the slot-size scheduler has no dynamic part to quiesce")
    ids = sorted(r.onu_id for r in table.values() if r.ranged)
    demands = [table[oid].hp_bytes + table[oid].be_bytes for oid in ids]
    sizes = ss_slot_sizes(demands, ss_payload_bytes(len(ids), net))
    slots = []
    t = 0
    for oid, nbytes in zip(ids, sizes):
        length = nbytes + net.report_overhead_bytes
        dur = bytes_to_duration(length, net.line_rate_bps)
        t += net.guard_time
        slots.append(Slot(oid, t, length, dur))
        t += dur
    return FrameSchedule(
        frame_index=frame_index,
        dynamic_grants=tuple(slots),
        total_guard_count=len(slots),
    )


ALLOCATORS: dict[Scheduler, Allocator] = {Scheduler.HSSR: hssr_allocate, Scheduler.SS: ss_allocate}


class OltTable:
    def __init__(self) -> None:
        self.records: dict[int, OnuRecord] = {}

    def add(self, rec: OnuRecord) -> None:
        if rec.onu_id in self.records:
            raise ProtocolError(f"ONU {rec.onu_id} already registered")
        self.records[rec.onu_id] = rec

    def register_report(self, req: GrantRequest) -> OnuRecord:
        rec = self.records.get(req.onu_id)
        if rec is None:
            raise ProtocolError(f"report from unknown ONU {req.onu_id}")
        if not rec.ranged:
            raise ProtocolError(f"report from unranged ONU {req.onu_id}")
        rec.last_report = req
        return rec

    def commit(self, schedule: FrameSchedule) -> None:
        for oid, value in schedule.counters.items():
            self.records[oid].counter = value

    def snapshot(self) -> dict[int, OnuRecord]:
        return {oid: replace(rec) for oid, rec in self.records.items()}


# ------------------------------------------------------------------- ranging


class RangingPhase(enum.Enum):
    IDLE = "idle"
    TOKEN_SENT = "token_sent"
    COMPLETED = "completed"


@dataclass(frozen=True)
class RangingPlan:
    frame_index: int
    token_time: SimTime
    window: tuple[SimTime, SimTime]


class RangingFailure(RuntimeError):
    pass


class RangingController:
    """Places ranging tokens so any reply lands in the quiesced dynamic part."""

    def __init__(self, net: NetworkConfig):
        self.net = net
        self.phase = RangingPhase.IDLE
        self.plan: RangingPlan | None = None
        self.new_onu_id: int | None = None
        self.measured_rtt: SimTime | None = None
        self.failures = 0

    def schedule_ranging(self, frame_index: int, frame_start: SimTime, steady_end: SimTime) -> RangingPlan:
        net = self.net
        ta = net.ranging_turnaround
        min_rtt = 2 * net.propagation(net.ranging_min_km)
        # Earliest possible reply lands one guard after the steady part.
        token = frame_start + max(steady_end + net.guard_time - min_rtt - ta, 0)
        window = (token + min_rtt + ta, token + min_rtt + ta + ranging_window_length(net))
        dynamic = (frame_start + steady_end + net.guard_time, frame_start + net.frame_duration - net.guard_time)
        if window[0] < dynamic[0] or window[1] > dynamic[1]:
            raise RangingFailure("frame too small for non-intrusive ranging")
        self.plan = RangingPlan(frame_index, token, window)
        self.phase = RangingPhase.TOKEN_SENT
        self.measured_rtt = None
        self.new_onu_id = None
        return self.plan

    def complete_ranging(self, reply_arrival: SimTime, onu_id: int | None = None) -> SimTime:
        """Measured round trip of the replying ONU; raises if outside the window."""
        plan = self.plan
        if plan is None or self.phase is not RangingPhase.TOKEN_SENT:
            raise RangingFailure("no ranging token outstanding")
        lo, hi = plan.window
        reply_end = reply_arrival + bytes_to_duration(self.net.ranging_reply_bytes, self.net.line_rate_bps)
        if reply_arrival < lo or reply_end > hi:
            self.failures += 1
            self.phase = RangingPhase.IDLE
            raise RangingFailure(f"ranging reply at {reply_arrival} outside window [{lo}, {hi}]")
        self.measured_rtt = reply_arrival - plan.token_time - self.net.ranging_turnaround
        self.new_onu_id = onu_id
        self.phase = RangingPhase.COMPLETED
        return self.measured_rtt
