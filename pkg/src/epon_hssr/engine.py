"""Deterministic discrete-event loop for the upstream channel.

All times are OLT-aligned integer nanoseconds: a transmission scheduled at
offset ``o`` of frame ``k`` is sent so that it reaches the OLT at
``k * frame + o``. Constant per-ONU propagation is thereby folded out of
packet delays; it only shows up in ranging and as the residual ranging error
seen by the channel.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import IO, Any

from .core import (
    Packet,
    ScenarioConfig,
    Scheduler,
    ServiceClass,
    SimTime,
    bytes_to_duration,
    validate,
)
from .metrics import MetricsCollector, MetricsSummary
from .olt import ALLOCATORS, FrameSchedule, OltTable, OnuRecord, RangingController, RangingFailure, Slot
from .onu import Admission, OnuMac, ProtocolError
from .traffic import PoissonSource, SizeDistribution, substream_seed


class EventKind(enum.IntEnum):
    """Event kinds; the value is the tie-break priority at equal times."""

    FRAME_START = 0
    SLOT_START = 1
    GRANT_TRANSMISSION = 2
    PACKET_ARRIVAL = 3
    REPORT_DELIVERY = 4
    RANGING_TOKEN = 5
    RANGING_REPLY = 6
    SIM_END = 7


class SimulationAbort(RuntimeError):
    """An invariant that only an implementation bug can break."""


class ChannelCollision(SimulationAbort):
    pass


@dataclass(frozen=True, order=True)
class Event:
    time: SimTime
    kind: EventKind
    sequence: int
    payload: Any = None


class EventQueue:
    """Min-heap keyed by (time, kind priority, insertion sequence)."""

    def __init__(self) -> None:
        self._heap: list[tuple] = []
        self._seq = 0
        self.last_time: SimTime = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: SimTime, kind: EventKind, payload: Any = None) -> None:
        if time < self.last_time:
            raise SimulationAbort(f"{kind.name} scheduled at {time}, before current time {self.last_time}")
        heapq.heappush(self._heap, (time, kind, self._seq, payload))
        self._seq += 1

    def pop(self) -> Event:
        time, kind, seq, payload = heapq.heappop(self._heap)
        if time < self.last_time:
            raise SimulationAbort(f"clock moved backwards: {time} < {self.last_time}")
        self.last_time = time
        return Event(time, kind, seq, payload)


class Channel:
    """Upstream receiver at the OLT: bursts must not overlap and, between
    different ONUs, must be at least ``min_gap`` apart."""

    def __init__(self, min_gap: SimTime):
        self.min_gap = min_gap
        self.last: tuple[int, SimTime, SimTime, str] | None = None
        self.bursts = 0

    def receive(self, onu_id: int, start: SimTime, end: SimTime, label: str) -> None:
        last = self.last
        if last is not None:
            l_onu, _, l_end, l_label = last
            need = self.min_gap if l_onu != onu_id else 0
            if start - l_end < need:
                raise ChannelCollision(
                    f"upstream collision: {label} from ONU {onu_id} at [{start}, {end}) is"
                    f" {start - l_end}ns after {l_label} from ONU {l_onu} ending {l_end}"
                )
            if end < l_end:
                return
        self.last = (onu_id, start, end, label)
        self.bursts += 1


@dataclass(frozen=True)
class Transmission:
    time: SimTime
    onu_id: int
    packet_id: int
    cls: ServiceClass
    effective_class: ServiceClass
    promoted: bool
    frame_index: int
    region: str
    quiesced: bool


class Simulation:
    """One scenario instance; :meth:`step` processes a single event."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        *,
        trace: IO[str] | None = None,
        record_schedules: bool = False,
        record_transmissions: bool = False,
        check_invariants: bool = False,
        hash_trace: bool = False,
    ):
        self.cfg = validate(cfg)
        self.net = net = cfg.network
        self.allocate = ALLOCATORS[cfg.scheduler]
        self.hssr = cfg.scheduler is Scheduler.HSSR
        self.report_before = net.report_snapshot == "before"
        self.rate = net.line_rate_bps
        self.report_dur = bytes_to_duration(net.report_overhead_bytes, self.rate)
        self.n_frames = cfg.n_frames
        self.end_time = self.n_frames * net.frame_duration
        self.dist = SizeDistribution(tuple(cfg.size_distribution))
        self.hp_rate, self.be_rate = cfg.per_onu_rates()

        self.queue = EventQueue()
        self.metrics = MetricsCollector(cfg.warmup_end)
        self.table = OltTable()
        self.ranging = RangingController(net)
        max_err = int(net.ranging_error_fraction * net.guard_time)
        self.max_ranging_error = max_err
        self.channel = Channel(net.guard_time - 2 * max_err)
        self.onus: dict[int, OnuMac] = {}
        self.sources: list[PoissonSource] = []

        self.trace = trace
        self._hash = hashlib.sha256() if hash_trace else None
        self.check_invariants = check_invariants
        self.schedules: list[FrameSchedule] | None = [] if record_schedules else None
        self.transmissions: list[Transmission] | None = [] if record_transmissions else None

        self.now: SimTime = 0
        self.frame_index = -1
        self.current: FrameSchedule | None = None
        self.guard_ns = 0
        self.quiesced_frames = 0
        self.next_ranging: SimTime = net.ranging_interval
        self.pending_joins = [(net.n_onus + i, j) for i, j in enumerate(cfg.joins)]
        self.ranging_log: list[dict[str, Any]] = []
        self.events_processed = 0
        self.finished = False

        for oid, dist_km in enumerate(net.distances):
            self._add_onu(oid, dist_km, start=0, offset=2 * net.propagation(dist_km), error=0)
        if cfg.initial_be_backlog_bytes:
            self._preload(cfg.initial_be_backlog_bytes)
        self.queue.push(0, EventKind.FRAME_START, 0)
        self.queue.push(self.end_time, EventKind.SIM_END)

    # ------------------------------------------------------------ set-up

    def _add_onu(self, oid: int, distance_km: float, start: SimTime, offset: SimTime, error: SimTime) -> None:
        net = self.net
        onu = OnuMac(
            oid,
            distance_km,
            net.subscribed_hp_bytes_per_frame,
            queue_capacity_bytes=net.queue_capacity_bytes,
            lookahead=net.lookahead_depth,
            report_overhead_bytes=net.report_overhead_bytes,
        )
        onu.ranging_offset = offset
        onu.ranging_error = error
        onu.meter.roll(start)
        self.onus[oid] = onu
        self.table.add(OnuRecord(oid, net.subscribed_hp_bytes_per_frame, ranging_offset=offset))
        for cls, rate in ((ServiceClass.HP, self.hp_rate), (ServiceClass.BE, self.be_rate)):
            src = PoissonSource(oid, cls, rate, self.dist, self.cfg.seed, start=start)
            self.sources.append(src)
            self._push_arrival(src)

    def _preload(self, nbytes: int) -> None:
        for oid, onu in self.onus.items():
            seq = 0
            left = nbytes
            while left > 0:
                size = min(1500, left) if left >= 40 else 40
                seq += 1
                pkt = Packet(-(oid * 10**9 + seq), oid, ServiceClass.BE, size, 0, effective_class=ServiceClass.BE)
                onu.generated_bytes += size
                self.metrics.on_admit(pkt)
                onu.be_queue.enqueue(pkt)
                left -= size

    def _push_arrival(self, src: PoissonSource) -> None:
        pkt = src.next_packet()
        if pkt is not None and pkt.arrival_time < self.end_time:
            self.queue.push(pkt.arrival_time, EventKind.PACKET_ARRIVAL, (src, pkt))

    # ------------------------------------------------------------ tracing

    def _trace(self, time: SimTime, kind: str, onu_id: int | str, detail: str = "") -> None:
        line = f"{time},{kind},{onu_id},{detail}\n"
        if self.trace is not None:
            self.trace.write(line)
        if self._hash is not None:
            self._hash.update(line.encode())

    @property
    def tracing(self) -> bool:
        return self.trace is not None or self._hash is not None

    # ------------------------------------------------------------ loop

    def step(self) -> Event:
        if not len(self.queue):
            raise SimulationAbort("event queue exhausted before SimEnd")
        ev = self.queue.pop()
        self.now = ev.time
        self.events_processed += 1
        kind = ev.kind
        if kind is EventKind.PACKET_ARRIVAL:
            self._on_arrival(*ev.payload)
        elif kind is EventKind.SLOT_START:
            self._on_slot(*ev.payload)
        elif kind is EventKind.GRANT_TRANSMISSION:
            self._on_grant(*ev.payload)
        elif kind is EventKind.REPORT_DELIVERY:
            self._on_report(ev.payload)
        elif kind is EventKind.FRAME_START:
            self._on_frame_start(ev.payload)
        elif kind is EventKind.RANGING_TOKEN:
            self._on_token(ev.payload)
        elif kind is EventKind.RANGING_REPLY:
            self._on_reply(*ev.payload)
        elif kind is EventKind.SIM_END:
            self.finished = True
            if self.tracing:
                self._trace(ev.time, "SimEnd", "-")
        return ev

    def run(self) -> MetricsSummary:
        while not self.finished:
            self.step()
        self.check_conservation()
        return self.summary()

    # ------------------------------------------------------------ handlers

    def _on_arrival(self, src: PoissonSource, pkt: Packet) -> None:
        onu = self.onus[pkt.onu_id]
        result = onu.admit(pkt, self.now)
        self.metrics.on_admit(pkt)
        if self.tracing:
            self._trace(self.now, "PacketArrival", pkt.onu_id, f"pkt={pkt.id};cls={pkt.cls.name};size={pkt.size_bytes};{result.value}")
        self._push_arrival(src)

    def _on_frame_start(self, k: int) -> None:
        net = self.net
        start = k * net.frame_duration
        if self.check_invariants:
            self.check_conservation()
        self.frame_index = k
        if not self.hssr:
            for onu in self.onus.values():
                onu.meter.roll(start)
        ranging_frame = self.hssr and net.ranging_enabled and start >= self.next_ranging
        sched = self.allocate(self.table.records, net, k, quiesce=ranging_frame)
        self.table.commit(sched)
        sched.check(net)
        self.current = sched
        if self.schedules is not None:
            self.schedules.append(sched)
        self.guard_ns += sched.total_guard_count * net.guard_time
        if sched.quiesced:
            self.quiesced_frames += 1
        if self.tracing:
            self._trace(start, "FrameStart", "-", f"frame={k};quiesced={int(sched.quiesced)};grants={len(sched.dynamic_grants)}")

        push = self.queue.push
        for slot in sched.steady_slots:
            push(start + slot.offset, EventKind.SLOT_START, (slot, k, "steady"))
        region = "dynamic" if self.hssr else "ss"
        for slot in sched.dynamic_grants:
            kind = EventKind.GRANT_TRANSMISSION if self.hssr else EventKind.SLOT_START
            push(start + slot.offset, kind, (slot, k, region))
        if ranging_frame:
            steady_end = sched.steady_slots[-1].end if sched.steady_slots else 0
            plan = self.ranging.schedule_ranging(k, start, steady_end)
            self.next_ranging += net.ranging_interval
            push(plan.token_time, EventKind.RANGING_TOKEN, plan)
        if k + 1 < self.n_frames:
            push(start + net.frame_duration, EventKind.FRAME_START, k + 1)

    def _receive(self, onu: OnuMac, slot: Slot, start: SimTime, label: str) -> None:
        rx = start - onu.ranging_error
        self.channel.receive(onu.onu_id, rx, rx + slot.duration, label)

    def _send(self, onu: OnuMac, pkts: list[Packet], t: SimTime, limit: SimTime, k: int, region: str) -> None:
        rate = self.rate
        record = self.metrics.record
        quiesced = self.current.quiesced if self.current is not None else False
        for pkt in pkts:
            t += -(-pkt.size_bytes * 8_000_000_000 // rate)
            pkt.departure_time = t
            onu.transmitted_bytes += pkt.size_bytes
            record(pkt)
            if self.transmissions is not None:
                self.transmissions.append(
                    Transmission(t, onu.onu_id, pkt.id, pkt.cls, pkt.effective_class, pkt.promoted, k, region, quiesced)
                )
            if self.tracing:
                self._trace(
                    t,
                    "Transmit",
                    onu.onu_id,
                    f"pkt={pkt.id};cls={pkt.cls.name};eff={pkt.effective_class.name};"
                    f"promoted={int(pkt.promoted)};frame={k};region={region};quiesced={int(quiesced)}",
                )
        if t > limit:
            raise SimulationAbort(f"ONU {onu.onu_id} overran its {region} slot in frame {k}")

    def _on_slot(self, slot: Slot, k: int, region: str) -> None:
        onu = self.onus[slot.onu_id]
        now = self.now
        self._receive(onu, slot, now, f"{region} slot of frame {k}")
        before = self.report_before
        if before:
            report = onu.build_report(k)
        if region == "steady":
            pkts = onu.fill_steady_slot(slot.length_bytes)
            # Policing window runs from one steady slot to the next.
            onu.meter.roll(now)
        else:
            pkts = onu.fill_mixed_slot(slot.length_bytes - self.net.report_overhead_bytes)
        if not before:
            # The report leads the burst but states what is still queued behind it.
            report = onu.build_report(k)
        if self.tracing:
            self._trace(now, "SlotStart", onu.onu_id, f"frame={k};region={region};bytes={slot.length_bytes}")
        t = now + self.report_dur
        self.queue.push(t - onu.ranging_error, EventKind.REPORT_DELIVERY, report)
        self._send(onu, pkts, t, now + slot.duration, k, region)

    def _on_grant(self, slot: Slot, k: int, region: str) -> None:
        onu = self.onus[slot.onu_id]
        now = self.now
        self._receive(onu, slot, now, f"dynamic grant of frame {k}")
        pkts = onu.transmit_grant(slot.length_bytes, now, now + slot.duration)
        if self.tracing:
            self._trace(now, "GrantTransmission", onu.onu_id, f"frame={k};bytes={slot.length_bytes}")
        self._send(onu, pkts, now, now + slot.duration, k, region)

    def _on_report(self, report) -> None:
        self.table.register_report(report)
        if self.tracing:
            self._trace(self.now, "ReportDelivery", report.onu_id, f"hp={report.hp_bytes};be={report.be_bytes}")

    def _on_token(self, plan) -> None:
        if self.tracing:
            self._trace(self.now, "RangingToken", "-", f"window={plan.window[0]}-{plan.window[1]}")
        for i, (oid, join) in enumerate(self.pending_joins):
            if join.time <= self.now:
                net = self.net
                rtt = 2 * net.propagation(join.distance_km)
                self.queue.push(self.now + rtt + net.ranging_turnaround, EventKind.RANGING_REPLY, (oid, join, plan))
                del self.pending_joins[i]
                return

    def _on_reply(self, oid: int, join, plan) -> None:
        net = self.net
        reply_dur = bytes_to_duration(net.ranging_reply_bytes, self.rate)
        self.channel.receive(oid, self.now, self.now + reply_dur, "ranging reply")
        record = {"onu_id": oid, "distance_km": join.distance_km, "token": plan.token_time,
                  "reply": self.now, "window": list(plan.window), "frame": plan.frame_index}
        try:
            rtt = self.ranging.complete_ranging(self.now, oid)
        except RangingFailure:
            record["ok"] = False
            self.ranging_log.append(record)
            # Retry at the next ranging opportunity.
            self.pending_joins.append((oid, join))
            return
        bound = self.max_ranging_error
        err = random.Random(substream_seed(self.cfg.seed, oid, "RANGING")).randint(-bound, bound) if bound else 0
        self._add_onu(oid, join.distance_km, start=self.now, offset=rtt + err, error=err)
        record.update(ok=True, rtt=rtt, offset=rtt + err)
        self.ranging_log.append(record)
        if self.tracing:
            self._trace(self.now, "RangingReply", oid, f"rtt={rtt};offset={rtt + err}")

    # ------------------------------------------------------------ checks

    def check_conservation(self) -> None:
        for onu in self.onus.values():
            onu.hp_queue.check()
            onu.be_queue.check()
            lhs = onu.generated_bytes
            rhs = onu.transmitted_bytes + onu.queued_bytes + onu.dropped_bytes
            if lhs != rhs:
                raise SimulationAbort(f"ONU {onu.onu_id}: generated {lhs} != sent+queued+dropped {rhs}")

    def summary(self) -> MetricsSummary:
        dropped_b = {c.name: 0 for c in (ServiceClass.HP, ServiceClass.BE)}
        dropped_p = dict(dropped_b)
        for onu in self.onus.values():
            for q in (onu.hp_queue, onu.be_queue):
                dropped_b[q.cls.name] += q.dropped_bytes
                dropped_p[q.cls.name] += q.dropped_packets
        return self.metrics.finalize(
            self.cfg,
            dropped_bytes=dropped_b,
            dropped_packets=dropped_p,
            queued_bytes=sum(o.queued_bytes for o in self.onus.values()),
            guard_overhead_fraction=self.guard_ns / self.end_time,
            frames_simulated=self.frame_index + 1,
            quiesced_frames=self.quiesced_frames,
            ranging=list(self.ranging_log),
            trace_hash=self._hash.hexdigest() if self._hash is not None else None,
        )


def run(cfg: ScenarioConfig, **kwargs: Any) -> MetricsSummary:
    """Validate ``cfg``, simulate it to completion and return the summary."""
    return Simulation(cfg, **kwargs).run()
