"""Command-line front end: ``epon-sim run`` and ``epon-sim figures``.

``run`` loads a JSON scenario (``--config`` or ``./epon_sim.json``), applies
flag overrides, expands ``--sweep`` dimensions into a cross product of points,
simulates every point (optionally in a process pool) and writes
``results.csv`` plus whichever figure-data files the sweep supports.

``figures`` rebuilds the ``.dat`` files from an existing CSV and fails when a
required sweep dimension is missing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import math
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Sequence

from .core import ConfigError, ScenarioConfig, Scheduler, ValidationIssue, load_config, parse_duration, validate
from .engine import Simulation, SimulationAbort
from .metrics import MetricsSummary, write_csv
from .onu import ProtocolError
from .olt import RangingFailure

DEFAULTS_FILE = "epon_sim.json"
DEFAULT_MAX_POINTS = 512
SWEEP_NAMES = ("offered_load", "n_onus", "guard_time", "scheduler")
_ALIASES = {"load": "offered_load", "onus": "n_onus", "guard": "guard_time"}

FIG5 = "fig5_delay_vs_load.dat"
FIG6 = "fig6_pdv_vs_load.dat"
FIG7 = "fig7_be_penalty.dat"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad input on the command line or in the data; maps to exit code 1."""


# --------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepSpec:
    name: str
    values: tuple[Any, ...]


def _range(text: str) -> list[Decimal]:
    try:
        start, stop, step = (Decimal(p) for p in text.split(":"))
    except (ValueError, InvalidOperation):
        raise UsageError(f"bad range {text!r}: expected start:stop:step") from None
    if step <= 0:
        raise UsageError(f"bad range {text!r}: step must be positive")
    if stop < start:
        raise UsageError(f"bad range {text!r}: stop below start")
    count = int((stop - start) / step) + 1
    return [start + i * step for i in range(count)]


def _convert(name: str, raw: str | Decimal) -> Any:
    try:
        if name == "offered_load":
            return float(raw)
        if name == "n_onus":
            value = Decimal(raw)
            if value != value.to_integral_value():
                raise ValueError("not an integer")
            return int(value)
        if name == "guard_time":
            # Bare numbers are nanoseconds.
            return parse_duration(f"{raw}ns" if isinstance(raw, Decimal) or raw.strip()[-1:].isdigit() else raw)
        return Scheduler(str(raw).strip().lower())
    except (ValueError, InvalidOperation) as exc:
        raise UsageError(f"sweep {name}: bad value {str(raw)!r} ({exc})") from None


def parse_sweep(text: str) -> SweepSpec:
    """``NAME=v1,v2,...`` or ``NAME=start:stop:step`` (inclusive)."""
    name, sep, spec = text.partition("=")
    name = _ALIASES.get(name.strip(), name.strip())
    if not sep or not spec.strip():
        raise UsageError(f"bad --sweep {text!r}: expected NAME=VALUES")
    if name not in SWEEP_NAMES:
        raise UsageError(f"bad --sweep {text!r}: unknown parameter {name!r} (choose from {', '.join(SWEEP_NAMES)})")
    if ":" in spec and name != "scheduler":
        if name == "guard_time" and any(c.isalpha() for c in spec):
            start, stop, step = (parse_duration(p) for p in spec.split(":"))
            raw: list[Any] = [Decimal(v) for v in _range(f"{start}:{stop}:{step}")]
        else:
            raw = _range(spec)
    else:
        raw = [p for p in (s.strip() for s in spec.split(",")) if p]
    values = tuple(_convert(name, v) for v in raw)
    if not values:
        raise UsageError(f"bad --sweep {text!r}: no values")
    return SweepSpec(name, values)


def point_seed(base_seed: int, cfg: ScenarioConfig) -> int:
    """Per-point seed from the base seed and the point's own parameters.

    The scheduler is left out on purpose so HSSR and SS see the same traffic.
    """
    key = f"{base_seed}|{cfg.offered_load!r}|{cfg.network.n_onus}|{cfg.network.guard_time}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def _apply(cfg: ScenarioConfig, name: str, value: Any) -> ScenarioConfig:
    if name == "offered_load":
        return cfg.replace(offered_load=value)
    if name == "scheduler":
        return cfg.replace(scheduler=value)
    if name == "n_onus" and cfg.network.onu_distances_km is not None and len(cfg.network.onu_distances_km) != value:
        # An explicit distance list cannot follow an ONU-count sweep.
        return cfg.with_network(n_onus=value, onu_distances_km=None)
    return cfg.with_network(**{name: value})


def _sort_key(cfg: ScenarioConfig) -> tuple:
    return (cfg.network.n_onus, cfg.network.guard_time, cfg.scheduler.value, cfg.offered_load)


def expand(base: ScenarioConfig, sweeps: Sequence[SweepSpec], max_points: int = DEFAULT_MAX_POINTS) -> list[ScenarioConfig]:
    """Cross product of all sweeps, seeded per point and sorted deterministically.

    Every point is validated; all failures are reported together.
    """
    merged: dict[str, tuple[Any, ...]] = {}
    for s in sweeps:
        if s.name in merged:
            raise UsageError(f"--sweep {s.name} given twice")
        merged[s.name] = tuple(dict.fromkeys(s.values))
    total = math.prod(len(v) for v in merged.values())
    if total > max_points:
        raise UsageError(f"sweep has {total} points, above the cap of {max_points}")
    names = sorted(merged)
    points = []
    for combo in itertools.product(*(merged[n] for n in names)):
        cfg = base
        for name, value in zip(names, combo):
            cfg = _apply(cfg, name, value)
        points.append(cfg.replace(seed=point_seed(base.seed, cfg)))
    issues: list[ValidationIssue] = []
    for cfg in points:
        try:
            validate(cfg)
        except ConfigError as exc:
            tag = f"[{cfg.scheduler.value} n_onus={cfg.network.n_onus} guard={cfg.network.guard_time}ns load={cfg.offered_load:g}] "
            issues.extend(ValidationIssue(i.code, tag + i.message) for i in exc.issues)
    if issues:
        raise ConfigError(issues)
    return sorted(points, key=_sort_key)


# ---------------------------------------------------------------------- running


def _trace_name(cfg: ScenarioConfig) -> str:
    n = cfg.network
    return f"trace_{cfg.scheduler.value}_n{n.n_onus}_gt{n.guard_time}_load{cfg.offered_load:g}.csv"


def run_point(args: tuple[ScenarioConfig, str | None]) -> MetricsSummary:
    cfg, trace_path = args
    if trace_path is None:
        return Simulation(cfg).run()
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("time_ns,kind,onu_id,detail\n")
        return Simulation(cfg, trace=fh).run()


def run_points(points: list[ScenarioConfig], jobs: int = 1, trace_dir: Path | None = None) -> list[MetricsSummary]:
    work = [(cfg, None if trace_dir is None else str(trace_dir / _trace_name(cfg))) for cfg in points]
    if jobs <= 1 or len(work) <= 1:
        return [run_point(w) for w in work]
    with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
        return list(pool.map(run_point, work))


# ------------------------------------------------------------------ figure data


def read_results(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not rows:
        raise UsageError(f"{path}: no result rows")
    need = {"scheduler", "n_onus", "guard_time_ns", "offered_load", "class", "mean_delay_us", "pdv_us", "be_penalty"}
    missing = need - set(rows[0])
    if missing:
        raise UsageError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
    return rows


def _fmt(value: str | None) -> str:
    return value if value not in (None, "") else "nan"


def _require(rows: list[dict[str, str]], figure: str) -> None:
    schedulers = {r["scheduler"] for r in rows}
    lacking = [s.value for s in Scheduler if s.value not in schedulers]
    if lacking:
        raise UsageError(f"{figure}: missing sweep dimension 'scheduler' (no {', '.join(lacking)} rows)")


def _comparison(rows: list[dict[str, str]], column: str, header: str) -> str:
    """Blocks per (n_onus, guard); one line per load with HSSR/SS x HP/BE columns."""
    table: dict[tuple[int, int], dict[float, dict[tuple[str, str], str]]] = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        block = (int(r["n_onus"]), int(r["guard_time_ns"]))
        table[block][float(r["offered_load"])][(r["scheduler"], r["class"])] = r[column]
    cols = [("hssr", "HP"), ("ss", "HP"), ("hssr", "BE"), ("ss", "BE")]
    out = []
    for (n, gt), by_load in sorted(table.items()):
        if out:
            out.append("\n")
        out.append(f"# n_onus={n} guard_time_ns={gt}\n")
        out.append(header + "\n")
        for load in sorted(by_load):
            cells = by_load[load]
            out.append(" ".join([f"{load:g}"] + [_fmt(cells.get(c)) for c in cols]) + "\n")
    return "".join(out)


def _penalty(rows: list[dict[str, str]]) -> str:
    curves: dict[tuple[str, int, int], dict[float, str]] = defaultdict(dict)
    for r in rows:
        if r["class"] == "BE":
            pen = r["be_penalty"]
            curves[(r["scheduler"], int(r["n_onus"]), int(r["guard_time_ns"]))][float(r["offered_load"])] = (
                f"{100 * float(pen):.4f}" if pen else "nan"
            )
    guards = {k[2] for k in curves}
    out = []
    for (sched, n, gt), points in sorted(curves.items()):
        if out:
            out.append("\n\n")
        label = f"{sched} n_onus={n}" + (f" guard_time_ns={gt}" if len(guards) > 1 else "")
        out.append(f"# curve {label}\n# load be_penalty_percent\n")
        out.extend(f"{load:g} {pen}\n" for load, pen in sorted(points.items()))
    return "".join(out)


def emit_figure_data(csv_path: str | Path, out_dir: str | Path, *, strict: bool = True) -> list[Path]:
    """Write the three ``.dat`` files from ``results.csv``.

    With ``strict=False`` a figure whose sweep dimensions are missing is
    skipped instead of raising.
    """
    rows = read_results(csv_path)
    out_dir = Path(out_dir)
    written = []
    jobs = [
        (FIG5, "fig5", lambda: _comparison(rows, "mean_delay_us", "# load hssr_hp_delay_us ss_hp_delay_us hssr_be_delay_us ss_be_delay_us")),
        (FIG6, "fig6", lambda: _comparison(rows, "pdv_us", "# load hssr_hp_pdv_us ss_hp_pdv_us hssr_be_pdv_us ss_be_pdv_us")),
        (FIG7, "fig7", lambda: _penalty(rows)),
    ]
    for name, label, render in jobs:
        try:
            _require(rows, label)
        except UsageError as exc:
            if strict:
                raise
            print(f"note: {exc}; {name} not written", file=sys.stderr)
            continue
        path = out_dir / name
        try:
            path.write_text(render(), encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
        written.append(path)
    return written


# ------------------------------------------------------------------------ main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="epon-sim",
        description="E-PON upstream DBA simulator (HSSR and slot-size baselines).",
    )
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="simulate one point or a sweep (default command)")
    r.add_argument("--config", metavar="PATH", help=f"JSON scenario (default ./{DEFAULTS_FILE})")
    r.add_argument("--scheduler", choices=[s.value for s in Scheduler])
    r.add_argument("--onus", type=int, metavar="N")
    r.add_argument("--load", type=float, metavar="RHO")
    r.add_argument("--guard-time", metavar="DUR", help="e.g. 100ns, 0.5us")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", metavar="DUR", help="simulated time, e.g. 5s")
    r.add_argument("--out", metavar="DIR", default=".", help="output directory (default .)")
    r.add_argument("--trace", action="store_true", help="write one event trace per point")
    r.add_argument("--sweep", action="append", default=[], metavar="NAME=SPEC", help="list a,b,c or range start:stop:step")
    r.add_argument("--jobs", type=int, default=1, metavar="K")
    r.add_argument("--max-points", type=int, default=DEFAULT_MAX_POINTS, help=argparse.SUPPRESS)
    f = sub.add_parser("figures", help="rebuild figure data files from results.csv")
    f.add_argument("csv", metavar="RESULTS_CSV")
    f.add_argument("--out", metavar="DIR", help="output directory (default: next to the CSV)")
    return p


def _load_base(args: argparse.Namespace) -> ScenarioConfig:
    path = args.config
    if path is None:
        if not Path(DEFAULTS_FILE).is_file():
            raise UsageError(f"no --config given and no {DEFAULTS_FILE} in the current directory")
        path = DEFAULTS_FILE
    try:
        cfg = load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    net: dict[str, Any] = {}
    if args.onus is not None:
        net["n_onus"] = args.onus
        if cfg.network.onu_distances_km is not None and len(cfg.network.onu_distances_km) != args.onus:
            net["onu_distances_km"] = None
    if args.guard_time is not None:
        net["guard_time"] = _flag_duration("--guard-time", args.guard_time)
    changes: dict[str, Any] = {}
    if args.scheduler is not None:
        changes["scheduler"] = Scheduler(args.scheduler)
    if args.load is not None:
        changes["offered_load"] = args.load
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.duration is not None:
        changes["sim_duration"] = _flag_duration("--duration", args.duration)
    if net:
        cfg = cfg.with_network(**net)
    return cfg.replace(**changes) if changes else cfg


def _flag_duration(flag: str, text: str) -> int:
    try:
        return parse_duration(text)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from None


def _cmd_run(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    base = _load_base(args)
    points = expand(base, [parse_sweep(s) for s in args.sweep], args.max_points)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    summaries = run_points(points, args.jobs, out if args.trace else None)
    for s in summaries:
        print(s.describe())
    results = out / "results.csv"
    write_csv(summaries, results)
    print(f"wrote {results} ({len(summaries)} point{'s' if len(summaries) != 1 else ''})")
    for path in emit_figure_data(results, out, strict=False):
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_figures(args: argparse.Namespace) -> int:
    csv_path = Path(args.csv)
    out = Path(args.out) if args.out else csv_path.parent
    for path in emit_figure_data(csv_path, out, strict=True):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv: Iterable[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "figures", "-h", "--help"):
        argv = ["run", *argv]
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "figures":
            return _cmd_figures(args)
        return _cmd_run(args)
    except ConfigError as exc:
        print(f"epon-sim: invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"epon-sim: {exc}", file=sys.stderr)
        if "no --config" in str(exc):
            parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (SimulationAbort, ProtocolError, RangingFailure, AssertionError) as exc:
        print(f"epon-sim: simulation aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"epon-sim: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
