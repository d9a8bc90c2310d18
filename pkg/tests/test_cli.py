import json
import subprocess
import sys

import numpy as np
import pytest

from kdvstab.cli import RunConfig, main, parse_config, run
from kdvstab.errors import ConfigurationError


def _write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def _summary(out):
    return json.loads((out / "summary.json").read_text())


class TestParse:
    def test_minimal_static(self, tmp_path):
        p = _write(tmp_path, {"L": 1, "N": 64, "lambda": 1, "T": 2, "mode": "static", "ic": "gauss", "amplitude": 1e-3})
        cfg = parse_config(p)
        assert cfg.L == 1.0 and isinstance(cfg.L, float)
        assert cfg.lambda_ == 1.0 and cfg.N == 64

    def test_dynamic_gain_rejected(self, tmp_path):
        p = _write(tmp_path, {"mode": "dynamic", "lambda": 1, "c0": 1, "lambda1": 2.5})
        with pytest.raises(ConfigurationError, match="lambda1"):
            parse_config(p)

    def test_dynamic_requires_fields(self):
        with pytest.raises(ConfigurationError, match="c0"):
            parse_config(overrides={"mode": "dynamic", "lambda1": 5.0})

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigurationError, match="lamda"):
            parse_config(_write(tmp_path, {"lamda": 1.0}))

    @pytest.mark.parametrize(
        "obj,field",
        [
            ({"N": 64.5}, "N"),
            ({"N": "64"}, "N"),
            ({"L": True}, "L"),
            ({"L": -1.0}, "L"),
            ({"guards": 1}, "guards"),
            ({"mode": "closed"}, "mode"),
            ({"ic": "tophat"}, "ic"),
            ({"lambdas": [1, "a"]}, "lambdas"),
            ({"seed": -1}, "seed"),
            ({"L_range": [7.0, 5.0]}, "L_range"),
        ],
    )
    def test_type_errors_name_field(self, tmp_path, obj, field):
        with pytest.raises(ConfigurationError, match=field):
            parse_config(_write(tmp_path, obj))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            parse_config(tmp_path / "nope.json")

    def test_not_an_object(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            parse_config(p)

    def test_precedence(self, tmp_path):
        p = _write(tmp_path, {"N": 32, "T": 1.0, "seed": 4})
        cfg = parse_config(p, ["N=48", "mode=linear"], seed=9)
        assert (cfg.N, cfg.T, cfg.seed, cfg.mode) == (48, 1.0, 9, "linear")

    def test_override_syntax(self):
        with pytest.raises(ConfigurationError):
            parse_config(overrides=["N"])

    def test_json_roundtrip(self):
        cfg = parse_config(overrides={"lambda": 2.0})
        d = cfg.to_json()
        assert d["lambda"] == 2.0 and "lambda_" not in d
        assert parse_config(overrides=d) == cfg


class TestRun:
    def test_static_demo(self, tmp_path):
        cfg = parse_config(out=str(tmp_path / "o"))
        assert run(cfg, "simulate") == 0
        s = _summary(tmp_path / "o")
        assert s["passed"] and s["fitted_rate"] >= 1.6
        assert (tmp_path / "o" / "report.csv").exists()
        resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
        assert resolved["lambda"] == 1.0 and resolved["command"] == "simulate"

    def test_critical_length_refused(self, tmp_path):
        out = tmp_path / "o"
        cfg = parse_config(overrides={"L": 2 * np.pi, "mode": "static"}, out=str(out))
        assert run(cfg, "simulate") != 0
        err = json.loads((out / "error.json").read_text())
        assert err["kind"] == "near-critical-length"
        assert not (out / "summary.json").exists()

    def test_linear_conserves(self, tmp_path):
        cfg = parse_config(overrides={"mode": "linear", "T": 0.5}, out=str(tmp_path))
        assert run(cfg, "simulate") == 0
        assert _summary(tmp_path)["max_relative_drift"] <= 1e-8
        assert (tmp_path / "trajectory.csv").exists()

    def test_guard_failure_exit(self, tmp_path):
        cfg = parse_config(overrides={"amplitude": 1.0, "T": 0.1}, out=str(tmp_path))
        assert run(cfg, "simulate") == 4
        assert json.loads((tmp_path / "error.json").read_text())["kind"] == "guard"

    def test_failed_check_exit(self, tmp_path):
        # a rate check that cannot pass on a very short horizon with tiny lambda
        cfg = parse_config(overrides={"T": 0.05, "lambda": 0.05}, out=str(tmp_path))
        code = run(cfg, "simulate")
        s = _summary(tmp_path)
        assert code == (0 if s["passed"] else 1)
        assert s["passed"] == all(s["checks"].values())

    def test_cache_reuse_identical(self, tmp_path):
        base = {"T": 0.2}
        a = parse_config(overrides=base, out=str(tmp_path / "a"), cache=str(tmp_path / "c"))
        b = parse_config(overrides=base, out=str(tmp_path / "b"), cache=str(tmp_path / "c"))
        assert run(a, "simulate") == 0 and run(b, "simulate") == 0
        assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
        assert len(list((tmp_path / "c").glob("*.q.bin"))) == 1

    def test_gramian_both(self, tmp_path):
        cfg = parse_config(overrides={"method": "both", "N": 32, "lambdas": [0.5, 1.0]}, out=str(tmp_path))
        assert run(cfg, "gramian") == 0
        rows = _summary(tmp_path)["gramians"]
        assert [r["lambda"] for r in rows] == [0.5, 1.0]
        assert all(r["relative_distance"] < 1e-3 for r in rows)

    def test_critical_scan(self, tmp_path):
        cfg = parse_config(overrides={"N": 32, "points": 7, "workers": 2}, out=str(tmp_path))
        assert run(cfg, "critical-scan") == 0
        assert (tmp_path / "scan.csv").read_text().startswith("L,lambda_min,lambda_max,cond,is_near_critical,nearest_critical_L\n")

    def test_diagnose(self, tmp_path, capsys):
        cfg = parse_config(overrides={"N": 32}, out=str(tmp_path))
        assert run(cfg, "diagnose") == 0
        s = _summary(tmp_path)
        assert s["sylvester_residual"] < 1e-9 and s["state_dimension"] == 30
        assert "admissibility_constant" in capsys.readouterr().out

    def test_finite_time(self, tmp_path):
        cfg = parse_config(overrides={"T": 1.0, "n_max": 2, "guards": False}, out=str(tmp_path))
        run(cfg, "finite-time")
        s = _summary(tmp_path)
        assert len(s["ratios"]) == 2
        assert json.loads((tmp_path / "schedule.json").read_text())["lambda"] == [0.5, 128.0, 3280.5]
        assert "stage,lambda_n,cond_Qn" in (tmp_path / "staged.csv").read_text().splitlines()[0]

    def test_unknown_command(self):
        with pytest.raises(ConfigurationError):
            run(RunConfig(), "plot")


class TestMain:
    def test_flags(self, tmp_path, capsys):
        out = tmp_path / "m"
        code = main(["simulate", "--out", str(out), "--seed", "5", "--override", "T=0.2", "--override", "ic=random", "--no-guards"])
        assert code == 0
        assert "smallness guards disabled" in capsys.readouterr().err
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["seed"] == 5 and resolved["guards"] is False and resolved["ic"] == "random"

    def test_bad_config_exit(self, tmp_path):
        code = main(["simulate", "--out", str(tmp_path), "--override", "lamda=1"])
        assert code == 2
        assert "lamda" in json.loads((tmp_path / "error.json").read_text())["message"]

    def test_env_cache(self, tmp_path, monkeypatch):
        monkeypatch.setenv("KDVSTAB_CACHE", str(tmp_path / "envcache"))
        assert main(["gramian", "--out", str(tmp_path / "g"), "--override", "N=16"]) == 0
        assert list((tmp_path / "envcache").glob("*.meta.json"))

    def test_module_entry(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "kdvstab", "diagnose", "--out", str(tmp_path), "--override", "N=16"],
            capture_output=True, text=True, check=False,
        )
        assert proc.returncode == 0, proc.stderr
        assert "sylvester_residual" in proc.stdout
