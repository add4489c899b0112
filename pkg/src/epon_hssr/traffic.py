"""Poisson packet sources with a discrete packet-size distribution.

Every (seed, onu_id, class) triple owns an independent Mersenne Twister
stream whose seed is the first 8 bytes of SHA-256 over the triple, so adding
ONUs or changing one source never shifts another source's sequence and the
streams are identical on every platform.
"""

from __future__ import annotations

import bisect
import hashlib
import random
from dataclasses import dataclass
from itertools import accumulate

from .core import NS_PER_SECOND, Packet, ServiceClass, SimTime


@dataclass(frozen=True)
class SizeDistribution:
    entries: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("size distribution needs at least one entry")
        for size, weight in self.entries:
            if not 40 <= size <= 1500:
                raise ValueError(f"packet size {size} outside [40, 1500]")
            if weight <= 0:
                raise ValueError(f"weight for size {size} must be positive")
        if abs(sum(w for _, w in self.entries) - 1.0) > 1e-9:
            raise ValueError("size weights must sum to 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.entries)

    @property
    def mean_bytes(self) -> float:
        return sum(s * w for s, w in self.entries)


def mean_interarrival(rate_bps: float, dist: SizeDistribution) -> SimTime | None:
    """Mean packet spacing in ns for a source offering ``rate_bps``.

    Returns ``None`` for a zero-rate source, which never emits.
    """
    if rate_bps <= 0:
        return None
    return round(dist.mean_bytes * 8 * NS_PER_SECOND / rate_bps)


def substream_seed(seed: int, onu_id: int, cls: ServiceClass | int | str) -> int:
    tag = cls.name if isinstance(cls, ServiceClass) else str(cls)
    digest = hashlib.sha256(f"{seed}:{onu_id}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def packet_id(onu_id: int, cls: ServiceClass, seq: int) -> int:
    # Ids depend only on the owning source, so runs that differ elsewhere
    # (an extra joining ONU, a different scheduler) still share packet ids.
    return ((onu_id * 2 + int(cls)) << 40) | seq


class PoissonSource:
    """Aggregate arrivals of one class at one ONU.

    Interarrival times are exponential (clamped to at least 1 ns so arrivals
    strictly increase) and sizes are i.i.d. draws from ``dist``.
    """

    def __init__(
        self,
        onu_id: int,
        cls: ServiceClass,
        rate_bps: float,
        dist: SizeDistribution,
        seed: int,
        start: SimTime = 0,
    ):
        self.onu_id = onu_id
        self.cls = cls
        self.rate_bps = rate_bps
        self.dist = dist
        self._rng = random.Random(substream_seed(seed, onu_id, cls))
        self._sizes = dist.sizes
        self._cum = list(accumulate(w for _, w in dist.entries))
        self._cum[-1] = 1.0
        mean = mean_interarrival(rate_bps, dist)
        self._lambda = None if mean is None else 1.0 / (dist.mean_bytes * 8 * NS_PER_SECOND / rate_bps)
        self.mean_gap = mean
        self.last_arrival = start
        self.emitted = 0

    @property
    def active(self) -> bool:
        return self._lambda is not None

    def next_packet(self) -> Packet | None:
        if self._lambda is None:
            return None
        rng = self._rng
        gap = max(1, round(rng.expovariate(self._lambda)))
        size = self._sizes[bisect.bisect_right(self._cum, rng.random())] if len(self._sizes) > 1 else self._sizes[0]
        self.last_arrival += gap
        pkt = Packet(
            id=packet_id(self.onu_id, self.cls, self.emitted),
            onu_id=self.onu_id,
            cls=self.cls,
            size_bytes=size,
            arrival_time=self.last_arrival,
            effective_class=self.cls,
        )
        self.emitted += 1
        return pkt
