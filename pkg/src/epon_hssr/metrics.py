"""Delay and throughput accounting, run summaries and CSV output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .core import NS_PER_MS, NS_PER_US, Packet, ScenarioConfig, ServiceClass, SimTime, config_to_dict

# One-way access delay bound for voice; reported, never enforced.
ACCESS_DELAY_BOUND_NS = 5 * NS_PER_MS


class RunningStats:
    """Welford accumulator: count, mean, M2 and max in O(1) memory."""

    __slots__ = ("count", "mean", "m2", "max")

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.max: float | None = None

    def add(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)
        if self.max is None or x > self.max:
            self.max = x

    @property
    def variance(self) -> float | None:
        """Population variance."""
        if self.count == 0:
            return None
        return self.m2 / self.count

    @property
    def std(self) -> float | None:
        v = self.variance
        return None if v is None else math.sqrt(max(v, 0.0))


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean_delay_ns: float | None
    delay_std_ns: float | None
    max_delay_ns: float | None

    @classmethod
    def of(cls, s: RunningStats) -> "GroupStats":
        if s.count == 0:
            return cls(0, None, None, None)
        return cls(s.count, s.mean, s.std, s.max)


@dataclass
class MetricsSummary:
    scheduler: str
    n_onus: int
    guard_time_ns: int
    offered_load: float
    seed: int
    per_class: dict[str, GroupStats]
    per_onu_class: dict[tuple[int, str], GroupStats]
    offered_be_bytes: int
    delivered_be_bytes: int
    hp_generated_bytes: int
    demoted_bytes: int
    promoted_bytes: int
    dropped_bytes: dict[str, int]
    dropped_packets: dict[str, int]
    generated_bytes: int
    delivered_bytes: int
    queued_bytes: int
    guard_overhead_fraction: float
    frames_simulated: int
    quiesced_frames: int
    hp_over_access_bound: int
    config: dict[str, Any] = field(default_factory=dict)
    ranging: list[dict[str, Any]] = field(default_factory=list)
    trace_hash: str | None = None

    @property
    def be_throughput_ratio(self) -> float:
        if self.offered_be_bytes == 0:
            return 1.0
        return min(1.0, self.delivered_be_bytes / self.offered_be_bytes)

    @property
    def be_penalty(self) -> float:
        return 1.0 - self.be_throughput_ratio

    @property
    def demotion_rate(self) -> float | None:
        if self.hp_generated_bytes == 0:
            return None
        return self.demoted_bytes / self.hp_generated_bytes

    def delay(self, cls: str | ServiceClass) -> GroupStats:
        key = cls.name if isinstance(cls, ServiceClass) else cls
        return self.per_class[key]

    def describe(self) -> str:
        lines = [
            f"{self.scheduler.upper()} n_onus={self.n_onus} load={self.offered_load:g}"
            f" guard={self.guard_time_ns}ns seed={self.seed} frames={self.frames_simulated}",
        ]
        for name, g in self.per_class.items():
            if g.count:
                lines.append(
                    f"  {name}: n={g.count} mean={g.mean_delay_ns / NS_PER_US:.1f}us"
                    f" pdv={g.delay_std_ns / NS_PER_US:.1f}us max={g.max_delay_ns / NS_PER_US:.1f}us"
                )
            else:
                lines.append(f"  {name}: no samples")
        rate = self.demotion_rate
        lines.append(
            f"  BE throughput ratio={self.be_throughput_ratio:.4f} (penalty {100 * self.be_penalty:.2f}%)"
            f" demotion={'n/a' if rate is None else f'{100 * rate:.2f}%'}"
            f" guard overhead={100 * self.guard_overhead_fraction:.3f}%"
        )
        return "\n".join(lines)


class MetricsCollector:
    def __init__(self, warmup_end: SimTime):
        self.warmup_end = warmup_end
        self.by_class = {c: RunningStats() for c in ServiceClass}
        self.by_onu: dict[tuple[int, ServiceClass], RunningStats] = {}
        self.offered_be_bytes = 0
        self.delivered_be_bytes = 0
        self.hp_generated_bytes = 0
        self.demoted_bytes = 0
        self.promoted_bytes = 0
        self.generated_bytes = 0
        self.delivered_bytes = 0
        self.hp_over_bound = 0

    def on_admit(self, pkt: Packet) -> None:
        self.generated_bytes += pkt.size_bytes
        if pkt.arrival_time < self.warmup_end:
            return
        if pkt.cls is ServiceClass.HP:
            self.hp_generated_bytes += pkt.size_bytes
        if pkt.effective_class is ServiceClass.BE:
            self.offered_be_bytes += pkt.size_bytes
            if pkt.cls is ServiceClass.HP:
                self.demoted_bytes += pkt.size_bytes

    def record(self, pkt: Packet) -> None:
        if pkt.departure_time is None:
            raise AssertionError(f"packet {pkt.id} recorded without a departure time")
        delay = pkt.departure_time - pkt.arrival_time
        if delay < 0:
            raise AssertionError(f"packet {pkt.id} departed before it arrived")
        self.delivered_bytes += pkt.size_bytes
        cls = pkt.effective_class
        if pkt.arrival_time >= self.warmup_end:
            if cls is ServiceClass.BE:
                self.delivered_be_bytes += pkt.size_bytes
            if pkt.promoted:
                self.promoted_bytes += pkt.size_bytes
        if pkt.departure_time < self.warmup_end:
            return
        self.by_class[cls].add(delay)
        key = (pkt.onu_id, cls)
        s = self.by_onu.get(key)
        if s is None:
            s = self.by_onu[key] = RunningStats()
        s.add(delay)
        if cls is ServiceClass.HP and delay > ACCESS_DELAY_BOUND_NS:
            self.hp_over_bound += 1

    def finalize(self, cfg: ScenarioConfig, **extra: Any) -> MetricsSummary:
        per_class = {c.name: GroupStats.of(self.by_class[c]) for c in (ServiceClass.HP, ServiceClass.BE)}
        per_onu = {(oid, c.name): GroupStats.of(s) for (oid, c), s in sorted(self.by_onu.items())}
        net = cfg.network
        return MetricsSummary(
            scheduler=cfg.scheduler.value,
            n_onus=net.n_onus,
            guard_time_ns=net.guard_time,
            offered_load=cfg.offered_load,
            seed=cfg.seed,
            per_class=per_class,
            per_onu_class=per_onu,
            offered_be_bytes=self.offered_be_bytes,
            delivered_be_bytes=self.delivered_be_bytes,
            hp_generated_bytes=self.hp_generated_bytes,
            demoted_bytes=self.demoted_bytes,
            promoted_bytes=self.promoted_bytes,
            generated_bytes=self.generated_bytes,
            delivered_bytes=self.delivered_bytes,
            hp_over_access_bound=self.hp_over_bound,
            config=config_to_dict(cfg),
            **extra,
        )


CSV_COLUMNS = [
    "scheduler",
    "n_onus",
    "guard_time_ns",
    "offered_load",
    "seed",
    "class",
    "count",
    "mean_delay_us",
    "pdv_us",
    "max_delay_us",
    "be_throughput_ratio",
    "be_penalty",
    "offered_be_bytes",
    "delivered_be_bytes",
    "demotion_rate",
    "promoted_bytes",
    "dropped_bytes",
    "dropped_packets",
    "guard_overhead_fraction",
    "frames_simulated",
    "hp_over_5ms",
    "config",
]


def _num(x: float | None, digits: int = 6) -> str:
    if x is None:
        return ""
    return f"{x:.{digits}f}"


def summary_rows(s: MetricsSummary) -> Iterable[list[str]]:
    config = json.dumps(s.config, sort_keys=True, separators=(",", ":"))
    for cls in ("HP", "BE"):
        g = s.per_class[cls]
        yield [
            s.scheduler,
            str(s.n_onus),
            str(s.guard_time_ns),
            repr(float(s.offered_load)),
            str(s.seed),
            cls,
            str(g.count),
            _num(None if g.mean_delay_ns is None else g.mean_delay_ns / NS_PER_US, 3),
            _num(None if g.delay_std_ns is None else g.delay_std_ns / NS_PER_US, 3),
            _num(None if g.max_delay_ns is None else g.max_delay_ns / NS_PER_US, 3),
            _num(s.be_throughput_ratio),
            _num(s.be_penalty),
            str(s.offered_be_bytes),
            str(s.delivered_be_bytes),
            _num(s.demotion_rate),
            str(s.promoted_bytes),
            str(s.dropped_bytes[cls]),
            str(s.dropped_packets[cls]),
            _num(s.guard_overhead_fraction, 9),
            str(s.frames_simulated),
            str(s.hp_over_access_bound) if cls == "HP" else "",
            config,
        ]


def write_csv(summaries: list[MetricsSummary], path: str | Path) -> None:
    """One header plus two rows (HP, BE) per summary, in the given order."""
    if not summaries:
        raise ValueError("write_csv needs at least one summary")
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for s in summaries:
                w.writerows(summary_rows(s))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
