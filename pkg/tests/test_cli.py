import csv
import json

import pytest

from epon_hssr import cli
from epon_hssr.core import ScenarioConfig, Scheduler
from epon_hssr.engine import SimulationAbort

BASE = {"network": {"n_onus": 4}, "sim_duration": "20ms", "seed": 3}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "base.json"
    path.write_text(json.dumps(BASE))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dat_blocks(path):
    """Data lines of a .dat file grouped by blank-line separated blocks."""
    blocks, cur = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            if cur:
                blocks.append(cur)
            cur = []
        elif not line.startswith("#"):
            cur.append(line.split())
    if cur:
        blocks.append(cur)
    return blocks


class TestSweepParsing:
    def test_range_inclusive_and_exact(self):
        s = cli.parse_sweep("offered_load=0.1:1.0:0.1")
        assert s.values == tuple(round(0.1 * i, 1) for i in range(1, 11))

    def test_list(self):
        assert cli.parse_sweep("scheduler=hssr,ss").values == (Scheduler.HSSR, Scheduler.SS)
        assert cli.parse_sweep("n_onus=8,16,32").values == (8, 16, 32)

    def test_guard_units(self):
        assert cli.parse_sweep("guard_time=20ns,0.5us,1000").values == (20, 500, 1000)
        assert cli.parse_sweep("guard_time=100ns:300ns:100ns").values == (100, 200, 300)

    def test_alias(self):
        assert cli.parse_sweep("load=0.5").name == "offered_load"

    @pytest.mark.parametrize("text", ["offered_load", "bogus=1", "n_onus=8.5", "offered_load=1:0:0.1", "scheduler=fast"])
    def test_bad(self, text):
        with pytest.raises(cli.UsageError):
            cli.parse_sweep(text)


class TestExpand:
    def test_twenty_points(self):
        pts = cli.expand(ScenarioConfig(), [cli.parse_sweep("offered_load=0.1:1.0:0.1"), cli.parse_sweep("scheduler=hssr,ss")])
        assert len(pts) == 20

    def test_cap(self):
        sweeps = [cli.parse_sweep("offered_load=0.1:1.0:0.1"), cli.parse_sweep("n_onus=1:60:1")]
        with pytest.raises(cli.UsageError, match="cap of 512"):
            cli.expand(ScenarioConfig(), sweeps)

    def test_schedulers_share_seeds(self):
        pts = cli.expand(ScenarioConfig(), [cli.parse_sweep("scheduler=hssr,ss")])
        assert pts[0].seed == pts[1].seed and pts[0].scheduler != pts[1].scheduler

    def test_extra_dimension_keeps_existing_points(self):
        one = cli.expand(ScenarioConfig(), [cli.parse_sweep("offered_load=0.3,0.6")])
        two = cli.expand(ScenarioConfig(), [cli.parse_sweep("offered_load=0.3,0.6"), cli.parse_sweep("n_onus=16,32")])
        assert set(one) <= set(two)

    def test_each_point_validated(self):
        from epon_hssr.core import ConfigError

        with pytest.raises(ConfigError) as exc:
            cli.expand(ScenarioConfig(), [cli.parse_sweep("guard_time=5,10,100")])
        assert len(exc.value.issues) == 2


class TestMain:
    def test_sweep_run(self, config, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(["--config", str(config), "--sweep", "load=0.2,0.4", "--sweep", "scheduler=hssr,ss", "--out", str(out)])
        assert code == 0
        r = rows(out / "results.csv")
        assert len(r) == 8
        assert {x["scheduler"] for x in r} == {"hssr", "ss"}
        fig5 = dat_blocks(out / cli.FIG5)
        assert len(fig5) == 1 and [len(x) for x in fig5[0]] == [5, 5]
        assert len(dat_blocks(out / cli.FIG7)) == 2
        assert "HSSR n_onus=4" in capsys.readouterr().out

    def test_overrides_beat_file_and_are_echoed(self, config, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["--config", str(config), "--onus", "3", "--scheduler", "ss", "--guard-time", "250ns",
                         "--duration", "10ms", "--load", "0.7", "--out", str(out)]) == 0
        (hp, be) = rows(out / "results.csv")
        assert (hp["n_onus"], hp["scheduler"], hp["guard_time_ns"], hp["offered_load"]) == ("3", "ss", "250", "0.7")
        echo = json.loads(hp["config"])
        assert echo["network"]["n_onus"] == 3 and echo["sim_duration"] == "10ms"
        assert echo["seed"] == int(hp["seed"])

    def test_guard_floor(self, config, capsys):
        assert cli.main(["--config", str(config), "--guard-time", "5ns"]) == 1
        assert "guard_time below 20ns" in capsys.readouterr().err

    def test_no_config_no_defaults(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert cli.main([]) == 1
        err = capsys.readouterr().err
        assert "usage:" in err and cli.DEFAULTS_FILE in err

    def test_defaults_file(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / cli.DEFAULTS_FILE).write_text(json.dumps(BASE))
        assert cli.main(["--duration", "5ms"]) == 0
        assert (tmp_path / "results.csv").exists()

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_onu": 3}))
        assert cli.main(["--config", str(path)]) == 1
        assert "'n_onu'" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        assert cli.main(["--config", str(path)]) == 1

    def test_runtime_abort(self, config, monkeypatch, capsys, tmp_path):
        def boom(*a, **k):
            raise SimulationAbort("upstream collision at frame 3")

        monkeypatch.setattr(cli, "run_points", boom)
        assert cli.main(["--config", str(config), "--out", str(tmp_path)]) == 2
        assert "frame 3" in capsys.readouterr().err

    def test_trace_files(self, config, tmp_path):
        assert cli.main(["--config", str(config), "--duration", "3ms", "--trace", "--out", str(tmp_path)]) == 0
        (trace,) = tmp_path.glob("trace_*.csv")
        lines = trace.read_text().splitlines()
        assert lines[0] == "time_ns,kind,onu_id,detail" and lines[-1].split(",")[1] == "SimEnd"

    def test_jobs_do_not_change_output(self, config, tmp_path):
        args = ["--config", str(config), "--sweep", "load=0.3,0.9", "--sweep", "scheduler=hssr,ss"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--jobs", "3", "--out", str(tmp_path / "b")]) == 0
        for name in ("results.csv", cli.FIG5, cli.FIG6, cli.FIG7):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestFigures:
    def test_fig7_curves_per_onu_count(self, config, tmp_path):
        out = tmp_path / "f"
        assert cli.main(["--config", str(config), "--duration", "5ms", "--sweep", "n_onus=2,3,4",
                         "--sweep", "scheduler=hssr,ss", "--sweep", "load=0.5,1.0", "--out", str(out)]) == 0
        text = (out / cli.FIG7).read_text()
        assert text.count("# curve") == 6
        assert all(len(b) == 2 for b in dat_blocks(out / cli.FIG7))
        assert len(dat_blocks(out / cli.FIG5)) == 3

    def test_figures_subcommand(self, config, tmp_path):
        out = tmp_path / "g"
        cli.main(["--config", str(config), "--duration", "5ms", "--sweep", "scheduler=hssr,ss", "--out", str(out)])
        (out / cli.FIG5).unlink()
        assert cli.main(["figures", str(out / "results.csv")]) == 0
        assert (out / cli.FIG5).exists()

    def test_empty_csv(self, tmp_path, capsys):
        path = tmp_path / "results.csv"
        path.write_text("")
        assert cli.main(["figures", str(path)]) == 1

    def test_missing_dimension_named(self, config, tmp_path, capsys):
        out = tmp_path / "h"
        assert cli.main(["--config", str(config), "--duration", "5ms", "--out", str(out)]) == 0
        assert not (out / cli.FIG5).exists()
        assert cli.main(["figures", str(out / "results.csv")]) == 1
        assert "'scheduler'" in capsys.readouterr().err
