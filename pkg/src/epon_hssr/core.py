"""Shared domain types, integer-nanosecond time helpers and scenario validation."""

from __future__ import annotations

import dataclasses
import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

NS_PER_SECOND = 1_000_000_000
NS_PER_US = 1_000
NS_PER_MS = 1_000_000

# Largest representable SimTime; mirrors a signed 64-bit counter.
MAX_TIME = 2**63 - 1

MIN_PACKET_BYTES = 40
MIN_GUARD_NS = 20
MAX_GUARD_NS = 1_000
MIN_DISTANCE_KM = 2.0
MAX_DISTANCE_KM = 20.0

SimTime = int


class ServiceClass(enum.IntEnum):
    """Upstream service classes; a higher value means a higher priority."""

    BE = 0
    HP = 1

    @property
    def label(self) -> str:
        return self.name


def check_time(value: int) -> SimTime:
    if not isinstance(value, int):
        raise TypeError(f"SimTime must be an integer, got {type(value).__name__}")
    if value < 0:
        raise ValueError(f"SimTime must be non-negative, got {value}")
    if value > MAX_TIME:
        raise OverflowError(f"SimTime overflow: {value}")
    return value


def add_time(a: SimTime, b: SimTime) -> SimTime:
    return check_time(a + b)


def sub_time(a: SimTime, b: SimTime) -> SimTime:
    if b > a:
        raise ValueError(f"time subtraction underflow: {a} - {b}")
    return a - b


def bytes_to_duration(n: int, rate_bps: int) -> SimTime:
    """Transmission time of ``n`` bytes at ``rate_bps``, rounded up to whole ns."""
    if rate_bps <= 0:
        raise ValueError("rate must be positive")
    if n < 0:
        raise ValueError("byte count must be non-negative")
    return check_time(-(-n * 8 * NS_PER_SECOND // rate_bps))


def duration_to_bytes(duration: SimTime, rate_bps: int) -> int:
    """Whole bytes that fit in ``duration`` at ``rate_bps`` (rounded down)."""
    if duration <= 0:
        return 0
    return duration * rate_bps // (8 * NS_PER_SECOND)


_UNITS = {"ns": 1, "us": NS_PER_US, "µs": NS_PER_US, "ms": NS_PER_MS, "s": NS_PER_SECOND}
_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ns|us|µs|ms|s)\s*$")


def parse_duration(text: str | int) -> SimTime:
    """Parse ``"100ns"``, ``"1ms"``, ``"0.1us"``, ``"10s"`` into integer nanoseconds.

    Bare integers are taken as nanoseconds. Values that do not land on a whole
    nanosecond are rejected rather than rounded.
    """
    if isinstance(text, bool):
        raise ValueError(f"not a duration: {text!r}")
    if isinstance(text, int):
        return check_time(text)
    m = _DURATION_RE.match(str(text))
    if not m:
        raise ValueError(f"not a duration: {text!r} (expected e.g. '100ns', '1ms', '10s')")
    from fractions import Fraction

    ns = Fraction(m.group(1)) * _UNITS[m.group(2)]
    if ns.denominator != 1:
        raise ValueError(f"duration {text!r} is not a whole number of nanoseconds")
    return check_time(int(ns))


def format_duration(ns: SimTime) -> str:
    for unit, scale in (("s", NS_PER_SECOND), ("ms", NS_PER_MS), ("us", NS_PER_US)):
        if ns and ns % scale == 0:
            return f"{ns // scale}{unit}"
    return f"{ns}ns"


@dataclass(slots=True, eq=False)
class Packet:
    id: int
    onu_id: int
    cls: ServiceClass
    size_bytes: int
    arrival_time: SimTime
    departure_time: SimTime | None = None
    # Queue the packet was admitted to; differs from ``cls`` after demotion.
    effective_class: ServiceClass = ServiceClass.BE
    # Sent inside a steady slot despite sitting in the BE queue.
    promoted: bool = False

    @property
    def demoted(self) -> bool:
        return self.cls is ServiceClass.HP and self.effective_class is ServiceClass.BE

    @property
    def delay(self) -> SimTime:
        if self.departure_time is None:
            raise ValueError(f"packet {self.id} has not departed")
        return self.departure_time - self.arrival_time


DEFAULT_SIZE_WEIGHTS: tuple[tuple[int, float], ...] = ((40, 0.4), (552, 0.3), (1500, 0.3))


@dataclass(frozen=True)
class Join:
    """A new ONU powering up at ``time`` at ``distance_km`` from the OLT."""

    time: SimTime
    distance_km: float


@dataclass(frozen=True)
class NetworkConfig:
    n_onus: int = 16
    line_rate_bps: int = 1_000_000_000
    frame_duration: SimTime = NS_PER_MS
    guard_time: SimTime = 100
    onu_distances_km: tuple[float, ...] | None = None
    propagation_ns_per_km: int = 5_000
    # None means 0.3 x line rate split equally over n_onus.
    subscribed_hp_bps_per_onu: int | None = None
    ranging_interval: SimTime = 10 * NS_PER_SECOND
    ranging_enabled: bool = True
    ranging_min_km: float = MIN_DISTANCE_KM
    ranging_max_km: float = MAX_DISTANCE_KM
    ranging_turnaround: SimTime = 0
    ranging_reply_bytes: int = 64
    # Ranging error is uniform in +/- fraction x guard_time.
    ranging_error_fraction: float = 0.25
    report_overhead_bytes: int = 64
    # Queue state a report describes: "before" or "after" the slot's own transmissions.
    report_snapshot: str = "before"
    lookahead_depth: int = 8
    queue_capacity_bytes: int = 10_000_000

    @property
    def distances(self) -> tuple[float, ...]:
        if self.onu_distances_km is not None:
            return tuple(self.onu_distances_km)
        if self.n_onus == 1:
            return (MIN_DISTANCE_KM,)
        # Spread evenly over the supported reach so propagation is heterogeneous.
        step = (MAX_DISTANCE_KM - MIN_DISTANCE_KM) / (self.n_onus - 1)
        return tuple(round(MIN_DISTANCE_KM + i * step, 6) for i in range(self.n_onus))

    @property
    def subscribed_hp_bps(self) -> int:
        if self.subscribed_hp_bps_per_onu is not None:
            return self.subscribed_hp_bps_per_onu
        return int(0.3 * self.line_rate_bps) // max(self.n_onus, 1)

    @property
    def subscribed_hp_bytes_per_frame(self) -> int:
        return self.subscribed_hp_bps * self.frame_duration // (8 * NS_PER_SECOND)

    @property
    def steady_slot_bytes(self) -> int:
        return self.subscribed_hp_bytes_per_frame + self.report_overhead_bytes

    def propagation(self, distance_km: float) -> SimTime:
        return round(distance_km * self.propagation_ns_per_km)

    def steady_part_end(self, n_slots: int) -> SimTime:
        """Offset at which the steady part of an HSSR frame ends."""
        slot = bytes_to_duration(self.steady_slot_bytes, self.line_rate_bps)
        return n_slots * (self.guard_time + slot)


class Scheduler(str, enum.Enum):
    HSSR = "hssr"
    SS = "ss"


@dataclass(frozen=True)
class ScenarioConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    scheduler: Scheduler = Scheduler.HSSR
    offered_load: float = 0.5
    hp_fraction: float = 0.3
    sim_duration: SimTime = 5 * NS_PER_SECOND
    warmup_fraction: float = 0.1
    seed: int = 1
    size_distribution: tuple[tuple[int, float], ...] = DEFAULT_SIZE_WEIGHTS
    allow_hp_oversubscription: bool = False
    joins: tuple[Join, ...] = ()
    # Bytes of 1500 B BE packets pre-queued at every initial ONU at t=0.
    initial_be_backlog_bytes: int = 0

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_network(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, network=dataclasses.replace(self.network, **changes))

    @property
    def warmup_end(self) -> SimTime:
        return int(self.sim_duration * self.warmup_fraction)

    @property
    def n_frames(self) -> int:
        f = self.network.frame_duration
        return -(-self.sim_duration // f)

    def per_onu_rates(self) -> tuple[float, float]:
        """Mean offered (HP, BE) bit rates of one ONU."""
        net = self.network
        per_onu = self.offered_load * net.line_rate_bps / net.n_onus
        return per_onu * self.hp_fraction, per_onu * (1.0 - self.hp_fraction)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ConfigError(ValueError):
    """Raised with every violated invariant of a scenario, not just the first."""

    def __init__(self, issues: list[ValidationIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


def _issues(cfg: ScenarioConfig) -> list[ValidationIssue]:
    out: list[ValidationIssue] = []

    def bad(code: str, message: str) -> None:
        out.append(ValidationIssue(code, message))

    net = cfg.network
    if not isinstance(net.n_onus, int) or net.n_onus < 1:
        bad("n_onus", f"n_onus must be a positive integer, got {net.n_onus!r}")
        return out
    if net.line_rate_bps <= 0:
        bad("line_rate_bps", "line_rate_bps must be positive")
        return out
    if net.guard_time < MIN_GUARD_NS:
        bad("guard_time_min", f"guard_time below 20ns (got {net.guard_time}ns)")
    if net.guard_time > MAX_GUARD_NS:
        bad("guard_time_max", f"guard_time above 1us (got {net.guard_time}ns)")
    if net.frame_duration <= 0:
        bad("frame_duration", "frame_duration must be positive")
        return out
    if net.onu_distances_km is not None and len(net.onu_distances_km) != net.n_onus:
        bad(
            "onu_distances_length",
            f"onu_distances_km has {len(net.onu_distances_km)} entries for {net.n_onus} ONUs",
        )
    distances = list(net.distances) + [j.distance_km for j in cfg.joins]
    for d in distances:
        if not MIN_DISTANCE_KM <= d <= MAX_DISTANCE_KM:
            bad("onu_distance_range", f"ONU distance {d} km outside [2, 20] km")
            break
    if net.propagation_ns_per_km <= 0:
        bad("propagation", "propagation_ns_per_km must be positive")
    else:
        max_prop = net.propagation(max(distances))
        if net.frame_duration < 2 * max_prop * 2:
            bad(
                "frame_alignment",
                f"frame/propagation alignment violated: frame {net.frame_duration}ns"
                f" < 2 x round trip {2 * max_prop}ns",
            )
    if net.report_overhead_bytes < 0 or net.lookahead_depth < 1:
        bad("onu_parameters", "report_overhead_bytes must be >= 0 and lookahead_depth >= 1")
    if net.report_snapshot not in ("before", "after"):
        bad("report_snapshot", f"report_snapshot must be 'before' or 'after', got {net.report_snapshot!r}")
    if net.queue_capacity_bytes <= 0:
        bad("queue_capacity", "queue_capacity_bytes must be positive")
    if net.subscribed_hp_bps < 0:
        bad("subscription", "subscribed_hp_bps_per_onu must be non-negative")

    n_slots = net.n_onus + len(cfg.joins)
    rate = net.line_rate_bps
    # Steady part plus one guard per slot and one for the dynamic part must leave room.
    steady_end = net.steady_part_end(n_slots)
    if steady_end + net.guard_time >= net.frame_duration:
        bad(
            "dynamic_capacity",
            f"steady part ({n_slots} slots, {steady_end}ns) leaves no dynamic part"
            f" in a {net.frame_duration}ns frame",
        )
    ss_payload = duration_to_bytes(net.frame_duration - net.n_onus * (net.guard_time + 1), rate)
    if ss_payload - net.n_onus * net.report_overhead_bytes <= 0:
        bad("ss_capacity", "frame cannot hold one report per ONU")

    if cfg.scheduler not in (Scheduler.HSSR, Scheduler.SS):
        bad("scheduler", f"unknown scheduler {cfg.scheduler!r}")
    if not 0.0 <= cfg.offered_load <= 1.0:
        bad("offered_load", f"offered_load must lie in [0, 1], got {cfg.offered_load}")
    if not 0.0 <= cfg.hp_fraction <= 1.0:
        bad("hp_fraction", f"hp_fraction must lie in [0, 1], got {cfg.hp_fraction}")
    if not 0.0 <= cfg.warmup_fraction < 1.0:
        bad("warmup_fraction", "warmup_fraction must lie in [0, 1)")
    if cfg.sim_duration <= 0:
        bad("sim_duration", "sim_duration must be positive")
    if not cfg.size_distribution:
        bad("size_distribution", "size_distribution needs at least one entry")
    else:
        sizes_ok = all(40 <= s <= 1500 for s, _ in cfg.size_distribution)
        weights_ok = all(w > 0 for _, w in cfg.size_distribution)
        if not sizes_ok:
            bad("size_distribution", "packet sizes must lie in [40, 1500] bytes")
        if not weights_ok:
            bad("size_distribution", "size weights must be strictly positive")
        elif abs(sum(w for _, w in cfg.size_distribution) - 1.0) > 1e-9:
            bad("size_distribution", "size weights must sum to 1")
    hp_offer = cfg.offered_load * cfg.hp_fraction * rate
    hp_subscribed = net.subscribed_hp_bps * net.n_onus
    if hp_offer > hp_subscribed * (1 + 1e-6) and not cfg.allow_hp_oversubscription:
        bad(
            "hp_oversubscription",
            f"HP offer {hp_offer:.0f} b/s exceeds subscribed {hp_subscribed} b/s"
            " (set allow_hp_oversubscription to permit)",
        )
    if cfg.joins:
        if cfg.scheduler is not Scheduler.HSSR:
            bad("joins_scheduler", "ONU joins require the hssr scheduler")
        if not net.ranging_enabled:
            bad("joins_ranging", "ONU joins require ranging_enabled")
    if net.ranging_enabled and cfg.scheduler is Scheduler.HSSR:
        window = ranging_window_length(net)
        if steady_end + 2 * net.guard_time + window > net.frame_duration:
            bad("ranging_window", "frame too small for non-intrusive ranging")
    if net.ranging_interval < net.frame_duration:
        bad("ranging_interval", "ranging_interval must be at least one frame")
    if not 0.0 <= net.ranging_error_fraction < 0.5:
        bad("ranging_error", "ranging_error_fraction must lie in [0, 0.5)")
    if cfg.initial_be_backlog_bytes < 0:
        bad("initial_backlog", "initial_be_backlog_bytes must be non-negative")
    return out


def ranging_window_length(net: NetworkConfig) -> SimTime:
    """Span of possible ranging-reply receptions for the configured reach."""
    spread = 2 * (net.propagation(net.ranging_max_km) - net.propagation(net.ranging_min_km))
    return spread + bytes_to_duration(net.ranging_reply_bytes, net.line_rate_bps)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    """Return ``cfg`` unchanged if valid, else raise :class:`ConfigError` listing every issue."""
    try:
        issues = _issues(cfg)
    except (TypeError, ValueError, OverflowError, AttributeError) as exc:
        issues = [ValidationIssue("malformed", str(exc))]
    if issues:
        raise ConfigError(issues)
    return cfg


# ---------------------------------------------------------------- JSON config

_TIME_FIELDS = {"frame_duration", "guard_time", "ranging_interval", "ranging_turnaround", "sim_duration"}
_NETWORK_FIELDS = {f.name for f in dataclasses.fields(NetworkConfig)}
_SCENARIO_FIELDS = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"network"}


def _coerce(name: str, value: Any) -> Any:
    if name in _TIME_FIELDS:
        return parse_duration(value)
    if name == "onu_distances_km" and value is not None:
        return tuple(float(v) for v in value)
    if name == "scheduler":
        return Scheduler(str(value).lower())
    if name == "size_distribution":
        return tuple((int(e["size"]), float(e["weight"])) for e in value)
    if name == "joins":
        return tuple(Join(parse_duration(j["time"]), float(j["distance_km"])) for j in value)
    return value


def config_from_dict(doc: dict[str, Any], base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Build a scenario from a JSON-shaped mapping.

    Network keys may sit under ``"network"`` or at top level. Unknown keys raise
    :class:`ConfigError` naming each offending key.
    """
    base = base or ScenarioConfig()
    net_changes: dict[str, Any] = {}
    changes: dict[str, Any] = {}
    issues: list[ValidationIssue] = []

    def take(key: str, value: Any, network_only: bool) -> None:
        try:
            if key in _NETWORK_FIELDS:
                net_changes[key] = _coerce(key, value)
            elif key in _SCENARIO_FIELDS and not network_only:
                changes[key] = _coerce(key, value)
            else:
                issues.append(ValidationIssue("unknown_key", f"unknown config key {key!r}"))
        except (KeyError, TypeError, ValueError) as exc:
            issues.append(ValidationIssue("bad_value", f"{key}: {exc}"))

    for key, value in doc.items():
        if key == "network":
            if not isinstance(value, dict):
                issues.append(ValidationIssue("bad_value", "network must be an object"))
                continue
            for k, v in value.items():
                take(k, v, network_only=True)
        else:
            take(key, value, network_only=False)
    if issues:
        raise ConfigError(issues)
    net = dataclasses.replace(base.network, **net_changes)
    return dataclasses.replace(base, network=net, **changes)


def load_config(path: str | Path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError([ValidationIssue("bad_document", f"{path}: top level must be an object")])
    return config_from_dict(doc)


def config_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    """Inverse of :func:`config_from_dict`; times are rendered with units."""
    net = {}
    for f in dataclasses.fields(NetworkConfig):
        v = getattr(cfg.network, f.name)
        if f.name in _TIME_FIELDS:
            v = format_duration(v)
        elif isinstance(v, tuple):
            v = list(v)
        net[f.name] = v
    return {
        "network": net,
        "scheduler": cfg.scheduler.value,
        "offered_load": cfg.offered_load,
        "hp_fraction": cfg.hp_fraction,
        "sim_duration": format_duration(cfg.sim_duration),
        "warmup_fraction": cfg.warmup_fraction,
        "seed": cfg.seed,
        "size_distribution": [{"size": s, "weight": w} for s, w in cfg.size_distribution],
        "allow_hp_oversubscription": cfg.allow_hp_oversubscription,
        "joins": [{"time": format_duration(j.time), "distance_km": j.distance_km} for j in cfg.joins],
        "initial_be_backlog_bytes": cfg.initial_be_backlog_bytes,
    }
