import json

import numpy as np
import pytest

from opocrit.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main, parse_config
from opocrit.experiments import ConfigError, RunConfig, coarse_config, resolve_config
from opocrit.grid import read_snapshot
from opocrit.params import reduced_etas

TINY = ["--nx", "8", "--ny", "8", "--lx", "5", "--ly", "5", "--dt", "0.01", "--trajectories", "4",
        "--t-equil", "0.1", "--t-average", "0.1", "--record-interval", "0.05"]


def run_cli(tmp_path, name, *args):
    out = tmp_path / name
    code = main([args[0], "--out", str(out), *args[1:]])
    return code, out


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest ")
    manifest = json.loads(lines[0][len("# manifest "):])
    header = lines[1].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[2:]])
    return manifest, header, rows


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        f = tmp_path / "empty.json"
        f.write_text("")
        cfg = parse_config("lifshitz", f)
        assert cfg.g == 0.01
        assert cfg.nx == 48 and cfg.trajectories == 200

    def test_defaults_without_preset_values(self):
        cfg = RunConfig()
        assert cfg.g == 0.01 and cfg.t_equil == 50.0 and cfg.method == "euler"

    def test_flag_overrides_file(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"mu": 0.95, "trajectories": 10}))
        cfg = parse_config("lifshitz", f, {"mu": 0.97})
        assert cfg.mu == 0.97 and cfg.trajectories == 10

    def test_file_overrides_preset(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"dt": 0.002}))
        assert parse_config("nongaussian", f).dt == 0.002
        assert parse_config("nongaussian", f, preset="paper").trajectories == 3200

    def test_unknown_and_mistyped_keys_are_listed(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"bogus": 1, "nx": 4.5, "mu": "one"}))
        with pytest.raises(ConfigError) as err:
            parse_config("lifshitz", f)
        text = str(err.value)
        assert "bogus" in text and "nx" in text and "mu" in text
        assert len(err.value.problems) == 3

    def test_rate_sign_contradiction(self):
        with pytest.raises(ConfigError):
            parse_config("scan-pump", flags={"scan_rate": -0.004})

    @pytest.mark.parametrize("flags", [dict(nx=4), dict(dt=0.0), dict(trajectories=0),
                                       dict(method="midpoint"), dict(seed=-1), dict(refine=-1),
                                       dict(scan_parameter="g", scan_rate=1.0)])
    def test_constraint_violations(self, flags):
        with pytest.raises(ConfigError):
            parse_config("lifshitz", flags=flags)

    def test_bad_json(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text("{nope")
        with pytest.raises(ConfigError):
            parse_config("lifshitz", f)
        f.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            parse_config("lifshitz", f)

    def test_coarse_config(self):
        cfg = resolve_config("nongaussian")
        c = coarse_config(cfg)
        assert c.dt == 2 * cfg.dt and c.refine == cfg.refine + 1 and c.seed == cfg.seed


class TestExitCodes:
    def test_selfcheck(self, capsys):
        assert main(["selfcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS self-consistent c(eta1=0)" in out
        assert "kei(0)" in out and "lambda+" in out
        assert "FAIL" not in out

    def test_config_errors_exit_1(self, tmp_path, capsys):
        assert main(["scan-pump", "--scan-rate", "-0.004", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["lifshitz", "--preset", "huge"]) == EXIT_CONFIG
        assert main(["lifshitz", "--nx", "eight"]) == EXIT_CONFIG
        assert main(["nosuch"]) == EXIT_CONFIG
        assert main(["lifshitz", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
        assert main(["lifshitz", "--seed", str(2**64)]) == EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err

    def test_bad_worker_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("OPO_NUM_WORKERS", "many")
        assert main(["lifshitz", *TINY, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_divergence_exits_2(self, tmp_path, capsys):
        code = main(["lifshitz", *TINY, "--mu", "60", "--dt", "0.05", "--out", str(tmp_path)])
        assert code == EXIT_NUMERICAL
        assert "numerical failure" in capsys.readouterr().err


class TestOutputs:
    def test_lifshitz_files_and_final_line(self, tmp_path, capsys):
        code, out = run_cli(tmp_path, "a", "lifshitz", *TINY, "--seed", "7")
        assert code == EXIT_OK
        last = capsys.readouterr().out.strip().splitlines()[-1]
        assert last.startswith("<|X|^2> = ") and "+-" in last
        manifest, header, rows = read_csv(out / "timeseries.csv")
        assert header == ["tau", "param_value", "mean_intensity", "stderr", "eta1", "eta2", "eta3"]
        assert manifest["config"]["seed"] == 7 and "workers" not in manifest["config"]
        assert manifest["subcommand"] == "lifshitz" and manifest["preset"] == "desk"
        assert rows.shape == (4, 7)
        _, header, rows = read_csv(out / "spectrum.csv")
        assert header == ["kx", "ky", "S"] and rows.shape == (64, 3)
        assert np.all(rows[:, 2] >= 0)
        _, header, _ = read_csv(out / "radial.csv")
        assert header == ["k", "S", "stderr"]
        summary = json.loads((out / "manifest.json").read_text())
        assert summary["results"]["intensity"]["n"] == 4

    def test_byte_identical_reruns(self, tmp_path):
        run_cli(tmp_path, "a", "nongaussian", *TINY)
        run_cli(tmp_path, "b", "nongaussian", *TINY)
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "spectrum_difference.csv" in files and "timeseries_gaussian.csv" in files
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rerun_from_manifest(self, tmp_path):
        run_cli(tmp_path, "a", "lifshitz", *TINY, "--seed", "3")
        manifest, _, _ = read_csv(tmp_path / "a" / "timeseries.csv")
        cfg_file = tmp_path / "again.json"
        cfg_file.write_text(json.dumps(manifest["config"]))
        run_cli(tmp_path, "b", "lifshitz", "--config", str(cfg_file))
        for name in ("timeseries.csv", "spectrum.csv", "radial.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        run_cli(tmp_path, "a", "lifshitz", *TINY, "--seed", "1")
        run_cli(tmp_path, "b", "lifshitz", *TINY, "--seed", "2")
        a = read_csv(tmp_path / "a" / "timeseries.csv")[2]
        b = read_csv(tmp_path / "b" / "timeseries.csv")[2]
        assert not np.array_equal(a[:, 2], b[:, 2])

    def test_worker_count_does_not_change_results(self, tmp_path, monkeypatch):
        run_cli(tmp_path, "a", "lifshitz", *TINY, "--workers", "1")
        run_cli(tmp_path, "b", "lifshitz", *TINY, "--workers", "3")
        monkeypatch.setenv("OPO_NUM_WORKERS", "2")
        run_cli(tmp_path, "c", "lifshitz", *TINY)
        for name in ("timeseries.csv", "spectrum.csv", "radial.csv", "manifest.json"):
            ref = (tmp_path / "a" / name).read_bytes()
            assert (tmp_path / "b" / name).read_bytes() == ref
            assert (tmp_path / "c" / name).read_bytes() == ref

    def test_scan_eta_columns_follow_formulas(self, tmp_path):
        code, out = run_cli(tmp_path, "s", "scan-pump", "--nx", "8", "--ny", "8", "--lx", "5",
                            "--ly", "5", "--trajectories", "2", "--t-equil", "0.05", "--dt", "0.01",
                            "--scan-rate", "1.0", "--scan-start", "0.9", "--scan-end", "1.1",
                            "--record-interval", "0.05")
        assert code == EXIT_OK
        _, _, rows = read_csv(out / "timeseries.csv")
        assert rows[-1, 1] == pytest.approx(1.1)
        assert np.all(np.diff(rows[:, 0]) > 0)
        for tau, value, _, _, e1, e2, e3 in rows:
            expected_mu = 0.9 + max(tau - 0.05, 0.0) * 1.0
            assert value == pytest.approx(min(expected_mu, 1.1), abs=1e-12)
            assert (e1, e2, e3) == pytest.approx(reduced_etas(value, 0.0, 0.01), abs=1e-12)

    def test_detuning_scan_profile_and_snapshot(self, tmp_path):
        code, out = run_cli(tmp_path, "d", "scan-detuning", "--nx", "8", "--ny", "8", "--lx", "5",
                            "--ly", "5", "--trajectories", "2", "--t-equil", "0.05", "--dt", "0.01",
                            "--scan-rate", "2.0", "--snapshot", "2")
        assert code == EXIT_OK
        _, header, rows = read_csv(out / "kx_profile.csv")
        assert header == ["tau", "param_value", "kx", "S"]
        _, _, ts = read_csv(out / "timeseries.csv")
        assert np.all(np.diff(ts[:, 1]) >= 0) and ts[-1, 1] == pytest.approx(0.5)
        comps, nx, ny = read_snapshot(out / "snapshot.opof")
        assert (nx, ny) == (8, 8) and comps.shape == (4, 8, 8)

    def test_mcmc_check(self, tmp_path, capsys):
        code, out = run_cli(tmp_path, "m", "mcmc-check", "--nx", "8", "--ny", "8", "--lx", "5",
                            "--ly", "5", "--trajectories", "4", "--t-equil", "0.1", "--t-average",
                            "0.2", "--dt", "0.01", "--mcmc-sweeps", "200", "--mcmc-chains", "2")
        assert code == EXIT_OK
        res = json.loads((out / "manifest.json").read_text())["results"]
        assert {"mcmc", "sde", "z_score", "acceptance"} <= set(res)
        assert "MCMC <|X|^2>" in capsys.readouterr().out

    def test_underscore_flag_spelling(self, tmp_path):
        code, out = run_cli(tmp_path, "u", "lifshitz", *TINY[:-2], "--record_interval", "0.1")
        assert code == EXIT_OK
        manifest, _, rows = read_csv(out / "timeseries.csv")
        assert manifest["config"]["record_interval"] == 0.1 and len(rows) == 2
