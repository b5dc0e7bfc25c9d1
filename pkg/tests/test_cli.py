import json

import numpy as np
import pytest

from proxmed import __version__
from proxmed.cli import main
from proxmed.config import ConfigError, DEFAULTS, load, materialize
from proxmed.dataset import design_roles, write_csv
from proxmed.report import dumps, fmt_float
from proxmed.semisynth import LinearSCM, simulate_linear


def make_config(tmp_path, seed=0, **scm):
    data, _, _ = simulate_linear(LinearSCM(n=scm.pop("n", 3000), **scm), seed)
    kinds = write_csv(data, tmp_path / "data.csv")
    cfg = {"data": {"path": str(tmp_path / "data.csv"), "kinds": kinds},
           "roles": design_roles(data).to_dict(), "seed": 0,
           "diagnostics": {"n_mc": 2000},
           "selection": {"K": 5}, "bootstrap": {"K": 10},
           "weak_ci": {"low": -2.0, "high": 2.0, "step": 0.01}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def read(path):
    return json.loads(path.read_text())


class TestConfig:
    def test_defaults_materialized(self):
        cfg = materialize({"seed": 3})
        assert cfg["seed"] == 3
        assert cfg["selection"]["K"] == DEFAULTS["selection"]["K"]
        assert cfg["weak_ci"]["step"] == 0.001

    def test_pointer_in_errors(self):
        with pytest.raises(ConfigError, match="/selection/K"):
            materialize({"selection": {"K": 0}})
        with pytest.raises(ConfigError, match="/bootstrap"):
            materialize({"bootstrap": {"stage": 5}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            materialize({"bogus": 1})

    def test_seed_override(self, monkeypatch):
        monkeypatch.setenv("PROXMED_SEED", "42")
        assert materialize({"seed": 1})["seed"] == 42
        monkeypatch.setenv("PROXMED_SEED", "x")
        with pytest.raises(ConfigError):
            materialize({})

    def test_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('seed = 5\n[estimator]\nn_splits = 4\n')
        cfg = load(p)
        assert cfg["seed"] == 5 and cfg["estimator"]["n_splits"] == 4


class TestReport:
    def test_seventeen_digits_round_trip(self):
        x = 0.1 + 0.2
        assert fmt_float(x) == "0.30000000000000004"
        obj = {"a": x, "b": [np.float64(1 / 3), np.int64(2), True, None], "c": float("nan")}
        back = json.loads(dumps(obj))
        assert back["a"] == x and back["b"][0] == 1 / 3 and np.isnan(back["c"])

    def test_stable(self):
        obj = {"z": 1.5, "a": [1, 2]}
        assert dumps(obj) == dumps(json.loads(dumps(obj)))


class TestCommands:
    def test_estimate_report(self, tmp_path):
        cfg = make_config(tmp_path)
        assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        rep = read(tmp_path / "o" / "report.json")
        assert rep["version"] == __version__ and rep["valid"] is True
        assert rep["config"]["selection"]["delta"] == DEFAULTS["selection"]["delta"]
        assert set(rep["diagnostics"]) >= {"primal", "dual", "f_test", "z_test", "rank"}
        assert abs(rep["estimate"]["theta"] - 0.5) < 0.2
        assert rep["timing"] is None

    def test_dual_failure_exit_two(self, tmp_path):
        cfg = make_config(tmp_path, d_to_x=1.0)
        assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        rep = read(tmp_path / "o" / "report.json")
        assert rep["valid"] is False and rep["diagnostics"]["dual"]["passed"] is False

    def test_missing_data_file(self, tmp_path, capsys):
        cfg = {"data": {"path": str(tmp_path / "absent.csv")},
               "roles": {"attribute": "D", "outcome": "Y", "z_proxies": ["z"],
                         "x_proxies": ["x"]}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["estimate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
        assert "absent.csv" in capsys.readouterr().err

    def test_invalid_config_exit_one(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"selection": {"delta": -1}}))
        assert main(["select-proxies", "--config", str(p)]) == 1
        assert "/selection/delta" in capsys.readouterr().err

    def test_selection_applied(self, tmp_path):
        cfg = make_config(tmp_path)
        raw = read(cfg)
        raw["selection"].update({"apply": True, "holdout_fraction": 0.5})
        cfg.write_text(json.dumps(raw))
        code = main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code in (0, 2)
        rep = read(tmp_path / "o" / "report.json")
        sel = rep["selected_proxies"]
        assert sel["selection_rows"] == 1500 and sel["estimation_rows"] == 1500
        assert rep["x_proxies"] == sel["chosen"]["x_labels"]

    def test_record_timing(self, tmp_path):
        cfg = make_config(tmp_path)
        raw = read(cfg)
        raw["record_timing"] = True
        cfg.write_text(json.dumps(raw))
        main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert read(tmp_path / "o" / "report.json")["timing"]["seconds"] > 0

    @pytest.mark.parametrize("command,files", [
        ("estimate", ["report.json"]),
        ("diagnose", ["report.json"]),
        ("select-proxies", ["candidates.json"]),
        ("bootstrap", ["replicates.csv", "bootstrap.json"]),
        ("influence", ["influence.csv", "influence_set.json"]),
    ])
    def test_byte_identical(self, tmp_path, command, files):
        cfg = make_config(tmp_path)
        for run in ("a", "b"):
            assert main([command, "--config", str(cfg), "--out", str(tmp_path / run)]) in (0, 2)
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_simulate_then_estimate(self, tmp_path):
        sim = tmp_path / "sim.json"
        sim.write_text(json.dumps({"simulate": {"n": 10_000, "replicates": 2},
                                   "diagnostics": {"n_mc": 2000}}))
        files = ("dataset.csv", "estimate_config.json", "metrics.json", "replicates.csv")
        snapshots = []
        for _ in range(2):
            # same directory both times: the emitted config records its absolute path
            assert main(["simulate", "--config", str(sim), "--out", str(tmp_path / "a")]) == 0
            snapshots.append([(tmp_path / "a" / f).read_bytes() for f in files])
        assert snapshots[0] == snapshots[1]
        est_cfg = tmp_path / "a" / "estimate_config.json"
        assert main(["estimate", "--config", str(est_cfg), "--out", str(tmp_path / "e")]) == 0
        theta = read(tmp_path / "e" / "report.json")["estimate"]["theta"]
        assert 0.45 <= theta <= 0.60
        assert read(tmp_path / "a" / "metrics.json")["metrics"]["n_runs"] == 2
