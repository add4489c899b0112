"""ONU-side MAC: class queues, ingress policing, slot packing and reporting."""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import Packet, ServiceClass, SimTime


class ProtocolError(RuntimeError):
    """A MAC message or grant that cannot occur under a correct schedule."""


def pack_slot(queue: Iterable[Packet], slot_bytes: int, lookahead: int) -> list[Packet]:
    """Greedy first-fit selection with bounded look-ahead.

    Repeatedly takes the first of the first ``lookahead`` remaining packets
    that fits the remaining budget and stops once none of them fits. Packets
    that were skipped keep their place at the head of the remaining queue and
    can only shrink the budget further, so the scan never has to restart.
    """
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    budget = slot_bytes
    selected: list[Packet] = []
    skipped = 0
    for pkt in queue:
        if skipped >= lookahead:
            break
        if pkt.size_bytes <= budget:
            selected.append(pkt)
            budget -= pkt.size_bytes
        else:
            skipped += 1
    return selected


class ClassQueue:
    def __init__(self, cls: ServiceClass, capacity_bytes: int):
        self.cls = cls
        self.capacity_bytes = capacity_bytes
        self.packets: deque[Packet] = deque()
        self.bytes = 0
        self.dropped_bytes = 0
        self.dropped_packets = 0

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def enqueue(self, pkt: Packet) -> bool:
        if self.bytes + pkt.size_bytes > self.capacity_bytes:
            self.dropped_bytes += pkt.size_bytes
            self.dropped_packets += 1
            return False
        self.packets.append(pkt)
        self.bytes += pkt.size_bytes
        return True

    def remove(self, selected: Sequence[Packet]) -> None:
        """Drop ``selected`` (all near the head) while keeping the others' order."""
        if not selected:
            return
        want = {id(p) for p in selected}
        kept: list[Packet] = []
        q = self.packets
        while want:
            pkt = q.popleft()
            if id(pkt) in want:
                want.discard(id(pkt))
                self.bytes -= pkt.size_bytes
            else:
                kept.append(pkt)
        q.extendleft(reversed(kept))

    def check(self) -> None:
        total = sum(p.size_bytes for p in self.packets)
        if total != self.bytes:
            raise AssertionError(f"{self.cls.name} queue bytes {self.bytes} != {total}")


class IngressMeter:
    """Per-window HP byte budget; surplus HP is demoted rather than dropped."""

    def __init__(self, budget_bytes: int, window_start: SimTime = 0):
        self.budget_bytes = budget_bytes
        self.window_start = window_start
        self.admitted = 0

    def remaining(self) -> int:
        return self.budget_bytes - self.admitted

    def charge(self, nbytes: int) -> bool:
        if self.admitted + nbytes > self.budget_bytes:
            return False
        self.admitted += nbytes
        return True

    def roll(self, now: SimTime) -> None:
        self.window_start = now
        self.admitted = 0


class Admission(enum.Enum):
    ADMITTED = "admitted"
    DEMOTED = "demoted"
    DROPPED = "dropped"


@dataclass(frozen=True)
class GrantRequest:
    onu_id: int
    hp_bytes: int
    be_bytes: int
    frame_index: int = -1

    def __post_init__(self) -> None:
        if self.hp_bytes < 0 or self.be_bytes < 0:
            raise ValueError("reported byte counts must be non-negative")


class OnuMac:
    def __init__(
        self,
        onu_id: int,
        distance_km: float,
        subscribed_bytes_per_frame: int,
        queue_capacity_bytes: int = 10_000_000,
        lookahead: int = 8,
        report_overhead_bytes: int = 64,
    ):
        self.onu_id = onu_id
        self.distance_km = distance_km
        self.hp_queue = ClassQueue(ServiceClass.HP, queue_capacity_bytes)
        self.be_queue = ClassQueue(ServiceClass.BE, queue_capacity_bytes)
        self.meter = IngressMeter(subscribed_bytes_per_frame)
        self.lookahead = lookahead
        self.report_overhead_bytes = report_overhead_bytes
        self.ranging_offset: SimTime | None = None
        # Residual alignment error after ranging: received = scheduled + error.
        self.ranging_error: SimTime = 0
        self.generated_bytes = 0
        self.transmitted_bytes = 0
        self._busy_until: SimTime = -1

    @property
    def ranged(self) -> bool:
        return self.ranging_offset is not None

    def queue(self, cls: ServiceClass) -> ClassQueue:
        return self.hp_queue if cls is ServiceClass.HP else self.be_queue

    @property
    def queued_bytes(self) -> int:
        return self.hp_queue.bytes + self.be_queue.bytes

    @property
    def dropped_bytes(self) -> int:
        return self.hp_queue.dropped_bytes + self.be_queue.dropped_bytes

    def admit(self, pkt: Packet, now: SimTime) -> Admission:
        if pkt.arrival_time != now:
            raise ValueError(f"packet {pkt.id} admitted at {now}, arrived {pkt.arrival_time}")
        self.generated_bytes += pkt.size_bytes
        if pkt.cls is ServiceClass.HP:
            if self.meter.remaining() >= pkt.size_bytes:
                if self.hp_queue.enqueue(pkt):
                    self.meter.charge(pkt.size_bytes)
                    pkt.effective_class = ServiceClass.HP
                    return Admission.ADMITTED
                return Admission.DROPPED
            pkt.effective_class = ServiceClass.BE
            return Admission.DEMOTED if self.be_queue.enqueue(pkt) else Admission.DROPPED
        pkt.effective_class = ServiceClass.BE
        return Admission.ADMITTED if self.be_queue.enqueue(pkt) else Admission.DROPPED

    def build_report(self, frame_index: int = -1) -> GrantRequest:
        return GrantRequest(self.onu_id, self.hp_queue.bytes, self.be_queue.bytes, frame_index)

    def _take(self, q: ClassQueue, budget: int) -> list[Packet]:
        chosen = pack_slot(q, budget, self.lookahead)
        q.remove(chosen)
        return chosen

    def fill_steady_slot(self, slot_bytes: int) -> list[Packet]:
        """HP first, then BE promoted into whatever the HP traffic left unused.

        The report occupies the first ``report_overhead_bytes`` of the slot.
        """
        budget = slot_bytes - self.report_overhead_bytes
        if budget < 0:
            raise ProtocolError(f"ONU {self.onu_id}: steady slot smaller than a report")
        sent = self._take(self.hp_queue, budget)
        residual = budget - sum(p.size_bytes for p in sent)
        if residual > 0 and self.be_queue.packets:
            promoted = self._take(self.be_queue, residual)
            for p in promoted:
                p.promoted = True
            sent.extend(promoted)
        return sent

    def transmit_grant(self, grant_bytes: int, start: SimTime | None = None, end: SimTime | None = None) -> list[Packet]:
        """Send BE traffic inside a dynamic-part grant."""
        if start is not None and end is not None:
            if start < self._busy_until:
                raise ProtocolError(f"ONU {self.onu_id}: overlapping grants at {start}")
            self._busy_until = end
        if grant_bytes <= 0:
            return []
        return self._take(self.be_queue, grant_bytes)

    def fill_mixed_slot(self, slot_bytes: int) -> list[Packet]:
        """Conventional slot: both classes share one arrival-ordered FIFO.

        ``slot_bytes`` excludes the report, which precedes the payload.
        """
        if slot_bytes <= 0:
            return []
        merged = heapq.merge(self.hp_queue, self.be_queue, key=lambda p: (p.arrival_time, p.id))
        chosen = pack_slot(merged, slot_bytes, self.lookahead)
        self.hp_queue.remove([p for p in chosen if p.effective_class is ServiceClass.HP])
        self.be_queue.remove([p for p in chosen if p.effective_class is ServiceClass.BE])
        return chosen
