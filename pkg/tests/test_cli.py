import json
import math

import pytest

from iongate import cli
from iongate.cli import (
    EXIT_CONFIG, EXIT_FAILED, EXIT_OK, EXIT_UNWRITABLE, ConfigError, check_config, main,
    parse_csv, run_config, sweep_points, to_csv, to_jsonl, to_plotdata,
)


def base_config(**sweep):
    cfg = {
        "schema_version": 1,
        "system": {"n_ions": 2, "coupling": 0.05},
        "gate": {"variant": "robust", "delta": 0.1},
        "initial": {"fock": 0},
    }
    if sweep:
        cfg["sweep"] = {k.replace("__", "."): v for k, v in sweep.items()}
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestValidation:
    def test_defaults_filled(self):
        full = check_config(base_config())
        assert full["gate"]["phi"] == pytest.approx(math.pi / 4)
        assert full["numerics"]["level"] == "exact"
        assert full["output"]["formats"] == ["csv", "jsonl"]

    @pytest.mark.parametrize("patch, field", [
        ({"system": {"n_ions": 1}}, "system.n_ions"),
        ({"gate": {"variant": "robust", "phi": 2.0}}, "gate.phi"),
        ({"gate": {"variant": "nope"}}, "gate.variant"),
        ({"extra": 1}, "<root>"),
    ])
    def test_field_reported(self, patch, field):
        cfg = {**base_config(), **patch}
        with pytest.raises(ConfigError) as err:
            check_config(cfg)
        assert err.value.field == field

    def test_sweep_axis_must_exist(self):
        with pytest.raises(ConfigError) as err:
            check_config(base_config(gate__bogus=[1, 2]))
        assert err.value.field == "sweep.gate.bogus"

    def test_sweep_values_checked(self):
        with pytest.raises(ConfigError):
            check_config(base_config(system__coupling=[0.05, 3.0]))

    def test_sweep_order(self):
        cfg = check_config(base_config(initial__fock=[0, 1, 2], gate__variant=["robust", "monochromatic"]))
        values = [v for v, _ in sweep_points(cfg)]
        assert [v["initial.fock"] for v in values] == [0, 0, 1, 1, 2, 2]
        assert [v["gate.variant"] for v in values[:2]] == ["robust", "monochromatic"]
        assert all("sweep" not in p for _, p in sweep_points(cfg))


class TestFormats:
    records = [
        {"sweep:initial.fock": 0, "pair": "0-1", "status": "ok", "fidelity": 0.999, "infidelity": 1e-3,
         "leakage": 1e-12, "amplitude_cap": 2.5, "wall_time": 0.1},
        {"sweep:initial.fock": 1, "pair": "0-1", "status": "ok", "fidelity": 0.99, "infidelity": 1e-2,
         "leakage": float("nan"), "amplitude_cap": 2.5, "wall_time": 0.2},
    ]

    def test_csv_roundtrip(self):
        text = to_csv(self.records)
        assert "wall_time" not in text.splitlines()[0]
        back = parse_csv(text)
        assert back[0]["infidelity"] == pytest.approx(1e-3, rel=1e-12)
        assert math.isnan(back[1]["leakage"])
        assert back[1]["pair"] == "0-1"

    def test_jsonl_nan_is_null(self):
        lines = to_jsonl(self.records).splitlines()
        assert json.loads(lines[1])["leakage"] is None

    def test_plotdata(self):
        rows = to_plotdata(self.records).splitlines()
        assert rows[0].startswith("#")
        assert rows[1].split("\t") == ["0", "pair=0-1", "0.001"]


class TestCommands:
    def test_schema(self, capsys):
        assert main(["schema"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["properties"]["schema_version"]["const"] == 1

    def test_validate(self, tmp_path, capsys):
        path = write(tmp_path, base_config(initial__fock=[0, 3]))
        assert main(["validate", str(path)]) == EXIT_OK
        assert "2 sweep point(s)" in capsys.readouterr().out

    def test_bad_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{\n  oops")
        assert main(["validate", str(path)]) == EXIT_CONFIG
        assert "line 2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        path = write(tmp_path, base_config())
        assert main(["run", str(path), "--out", str(blocker / "sub")]) == EXIT_UNWRITABLE

    def test_failed_point_exit(self, tmp_path):
        cfg = base_config()
        cfg["numerics"] = {"margin": 2}
        cfg["initial"] = {"fock": 4}
        path = write(tmp_path, cfg)
        code = main(["run", str(path), "--out", str(tmp_path / "o")])
        # a cutoff of n + 2 leaks badly even after the retries
        assert code == EXIT_FAILED
        text = (tmp_path / "o" / "cfg.csv").read_text()
        assert "CutoffTooSmallError" in text

    def test_run_and_emit(self, tmp_path, capsys):
        cfg = base_config(initial__fock=[0, 1], gate__variant=["robust", "ms_single_mode"])
        cfg["output"] = {"formats": ["csv", "jsonl", "plotdata"], "stem": "demo"}
        path = write(tmp_path, cfg)
        assert main(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
        rows = parse_csv((tmp_path / "out" / "demo.csv").read_text())
        assert len(rows) == 4
        assert all(r["status"] == "ok" for r in rows)
        robust = [r for r in rows if r["sweep:gate.variant"] == "robust"]
        ms = [r for r in rows if r["sweep:gate.variant"] == "ms_single_mode"]
        assert all(r["infidelity"] < 1e-4 for r in robust)
        for a, b in zip(robust, ms):
            assert b["ratio_to_robust"] == pytest.approx(b["infidelity"] / a["infidelity"], rel=1e-9)
        capsys.readouterr()
        jl = tmp_path / "out" / "demo.jsonl"
        assert main(["emit", str(jl), "--format", "plotdata", "--x", "initial.fock"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[1].startswith("0\tgate.variant=robust;pair=0-1\t")
        target = tmp_path / "again.csv"
        assert main(["emit", str(jl), "--format", "csv", "--out", str(target)]) == EXIT_OK
        assert target.read_text() == (tmp_path / "out" / "demo.csv").read_text()


def test_workers_do_not_change_output(monkeypatch):
    cfg = check_config(base_config(initial__fock=[0, 1, 2]))
    serial = to_csv(run_config(cfg, 1))
    parallel = to_csv(run_config(cfg, 3))
    assert serial == parallel
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli._workers(None) == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "junk")
    assert cli._workers(None) == 1
    assert cli._workers(2) == 2
