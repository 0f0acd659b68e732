import json
import os

import pytest

import sconce.cli as cli
from sconce.errors import ConfigError

MINIMAL = {
    "scenario": {
        "drift": {"kind": "zero"},
        "ic": {"kind": "arctan_shift", "delta": 0.1},
    }
}

QUICK_QUADRATIC = {
    "scenario": {
        "drift": {"kind": "quadratic", "kappa": 1.0},
        "ic": {"kind": "arctan_shift", "delta": 0.1},
        "window": {"x_lo": -2.0, "x_hi": 2.0, "n_scan": 401},
        "T": 1.0,
    },
    "simulation": {"n_steps": 200, "t_eval": [1.0], "x_eval": [0.0], "t0": 0.1},
    "montecarlo": {"n_paths": 400, "n_prime": 60, "seed": 0, "theta_nodes": [0.5, 2.0]},
    "audit": {"second_order_paths": 2},
}


def cfg(d):
    return cli.parse_config(json.dumps(d))


class TestParseConfig:
    def test_minimal_fills_documented_defaults(self):
        config = cfg(MINIMAL)
        assert config.horizon == 1.0
        assert config.n_steps == 1000
        assert config.n_paths == 10_000
        assert config.seed == 0
        assert config.window.x_lo == -2.0 and config.window.x_hi == 2.0
        assert config.t0 == 0.1
        assert config.theta_nodes == (0.1, 0.5, 1.0, 2.0, 4.0)
        assert config.bandwidth == "auto"

    def test_echo_is_replayable(self):
        config = cfg(QUICK_QUADRATIC)
        again = cli.parse_config(json.dumps(config.echo()))
        assert again.echo() == config.echo()

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError) as err:
            cfg({**MINIMAL, "typo_section": {}})
        assert any("typo_section" in m for m in err.value.messages)

    def test_t_eval_beyond_horizon(self):
        bad = dict(MINIMAL)
        bad["simulation"] = {"t_eval": [2.0]}
        with pytest.raises(ConfigError) as err:
            cfg(bad)
        assert any("t_eval must be <= T" in m for m in err.value.messages)

    def test_t0_floor_for_sandwich(self):
        bad = dict(MINIMAL)
        bad["simulation"] = {"t_eval": [0.05], "t0": 0.1}
        with pytest.raises(ConfigError) as err:
            cfg(bad)
        assert any("t0" in m for m in err.value.messages)

    def test_negative_bandwidth(self):
        bad = dict(MINIMAL)
        bad["kde"] = {"bandwidth": -1}
        with pytest.raises(ConfigError) as err:
            cfg(bad)
        assert any("kde.bandwidth" in m for m in err.value.messages)

    def test_all_errors_collected(self):
        bad = {
            "scenario": {"drift": {"kind": "zero"}, "ic": {"kind": "arctan_shift", "delta": 0.1}},
            "simulation": {"n_steps": 5, "t_eval": [3.0]},
            "kde": {"bandwidth": -1},
        }
        with pytest.raises(ConfigError) as err:
            cfg(bad)
        assert len(err.value.messages) >= 3

    def test_off_grid_t_eval_rejected(self):
        bad = dict(MINIMAL)
        bad["simulation"] = {"n_steps": 100, "t_eval": [0.10503], "t0": 0.01}
        with pytest.raises(ConfigError) as err:
            cfg(bad)
        assert any("not a node" in m for m in err.value.messages)


class TestRun:
    @pytest.fixture()
    def quick_config(self, tmp_path):
        d = dict(QUICK_QUADRATIC)
        d["outputs"] = {"directory": str(tmp_path / "out"), "formats": ["json", "csv"]}
        return cfg(d)

    def test_check_stage(self, quick_config):
        report, code = cli.run(quick_config, "check")
        assert code == 0
        assert report.hypotheses["cc11"] is True
        assert report.constants["t=1"]["c5"] > 0
        assert not report.malliavin_audit

    def test_all_stage_writes_artifacts(self, quick_config):
        report, code = cli.run(quick_config, "all")
        out = quick_config.out_dir
        assert os.path.exists(os.path.join(out, "report.json"))
        assert os.path.exists(os.path.join(out, "density.csv"))
        assert os.path.exists(os.path.join(out, "samples.csv"))
        with open(os.path.join(out, "density.csv")) as f:
            assert f.readline().strip() == "z,rho_hat,se,lower_env,upper_env"
        with open(os.path.join(out, "samples.csv")) as f:
            assert f.readline().strip() == "index,u,du_norm_sq,in_window"
        # quadratic on [-2, 2] exits well above the 1% exclusion tolerance,
        # so the run must report a failing validation verdict (exit 1)
        assert code == 1
        statuses = {k: v["status"] for k, v in report.verdicts.items()}
        assert statuses["exclusion_rate[t=1,x=0]"] == "fail"
        assert statuses["malliavin_bounds[t=1,x=0]"] == "pass"
        assert statuses["bouleau_hirsch[t=1,x=0]"] == "pass"

    def test_determinism_across_runs_and_threads(self, tmp_path):
        # identical config (same output dir): rerunning must reproduce
        # report.json byte for byte apart from timings
        d = dict(QUICK_QUADRATIC)
        d["outputs"] = {"directory": str(tmp_path / "out"), "formats": ["json"]}

        def one(threads):
            cli.run(cfg(d), "all", threads=threads)
            payload = json.loads((tmp_path / "out" / "report.json").read_text())
            payload.pop("timings")
            return json.dumps(payload, sort_keys=True)

        assert one(1) == one(1) == one(4)

    def test_zero_drift_wide_window_passes(self, tmp_path):
        d = {
            "scenario": {
                "drift": {"kind": "zero"},
                "ic": {"kind": "arctan_shift", "delta": 0.1},
                "window": {"x_lo": -12.0, "x_hi": 12.0, "n_scan": 401},
            },
            "simulation": {"n_steps": 200, "t_eval": [1.0], "x_eval": [0.0], "t0": 0.1},
            "montecarlo": {"n_paths": 500, "n_prime": 50, "seed": 0, "theta_nodes": [0.5]},
            "outputs": {"directory": str(tmp_path / "out"), "formats": ["json", "csv"]},
        }
        report, code = cli.run(cfg(d), "all")
        assert code == 0, report.verdicts
        assert all(
            v["status"] in ("pass", "not-applicable") for v in report.verdicts.values()
        )

    def test_divergence_exit_code(self, tmp_path):
        # steep quadratic blows up a large fraction of backward paths
        d = {
            "scenario": {
                "drift": {"kind": "quadratic", "kappa": 30.0},
                "ic": {"kind": "arctan_shift", "delta": 0.1},
                "window": {"x_lo": -50.0, "x_hi": 50.0},
            },
            "simulation": {"n_steps": 200, "t_eval": [1.0], "x_eval": [0.0], "t0": 0.1},
            "montecarlo": {"n_paths": 200, "n_prime": 10, "seed": 0, "theta_nodes": [0.5]},
            "outputs": {"directory": str(tmp_path / "out"), "formats": ["json"]},
            "audit": {"second_order_paths": 0},
        }
        report, code = cli.run(cfg(d), "simulate")
        assert code == 3
        key = "t=1,x=0"
        assert report.malliavin_audit[key]["n_diverged"] > 2


class TestMain:
    def test_config_error_exit_2(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({**MINIMAL, "kde": {"bandwidth": -1}}))
        code = cli.main(["check", "--config", str(p)])
        assert code == 2
        assert "kde.bandwidth" in capsys.readouterr().err

    def test_missing_file_exit_2(self, capsys):
        assert cli.main(["check", "--config", "/nonexistent.json"]) == 2

    def test_check_roundtrip(self, tmp_path, capsys):
        p = tmp_path / "ok.json"
        payload = dict(MINIMAL)
        payload["outputs"] = {"directory": str(tmp_path / "out"), "formats": ["json"]}
        p.write_text(json.dumps(payload))
        code = cli.main(["check", "--config", str(p), "--threads", "1"])
        assert code == 0
        assert os.path.exists(tmp_path / "out" / "report.json")

    def test_seed_and_out_overrides(self, tmp_path):
        p = tmp_path / "ok.json"
        d = dict(QUICK_QUADRATIC)
        d["montecarlo"] = {**QUICK_QUADRATIC["montecarlo"], "n_paths": 50, "n_prime": 10}
        p.write_text(json.dumps(d))
        out = tmp_path / "alt"
        code = cli.main(
            ["check", "--config", str(p), "--seed", "9", "--out", str(out), "--threads", "1"]
        )
        assert code == 0
        with open(out / "report.json") as f:
            assert json.load(f)["seed"] == 9
