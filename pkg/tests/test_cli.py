import hashlib
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from varnet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, config_hash, run_cli, validate_config, ConfigError
from varnet.datasets import load_csv
from varnet.likelihood import student_t_nll
from varnet.model import load_snapshot, predict


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def toy_csv(tmp_path):
    out = tmp_path / "d.csv"
    assert run_cli(["gen-data", "toy-sine", "--n", "120", "--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


SMALL_TRAIN = {"train": {"total_iters": 200, "lr": 0.01}}


class TestBasics:
    def test_help(self, capsys):
        assert run_cli(["--help"]) == EXIT_OK
        assert "usage" in capsys.readouterr().out

    def test_unknown_command(self, capsys):
        assert run_cli(["fly"]) == EXIT_CONFIG

    def test_gen_data_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run_cli(["gen-data", "toy-sine", "--n", "500", "--seed", "7", "--out", str(out)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 501

    @pytest.mark.parametrize("gen,cols", [("two-moons-4d", 4), ("seasonal", 2)])
    def test_other_generators(self, tmp_path, gen, cols):
        out = tmp_path / "g.csv"
        assert run_cli(["gen-data", gen, "--n", "30", "--seed", "1", "--day-step", "73", "--n-years", "3", "--out", str(out)]) == EXIT_OK
        assert len(out.read_text().splitlines()[1].split(",")) == cols

    def test_manifest(self, toy_csv):
        man = json.loads(toy_csv.with_name("d.csv.manifest.json").read_text())
        assert man["seed"] == 7 and man["config_hash"] == config_hash(man["config"])
        assert {"numpy", "scipy", "python", "varnet"} <= set(man["versions"])
        assert man["outputs"]["d.csv"] == sha(toy_csv)


class TestConfigErrors:
    def test_unknown_field(self, tmp_path, toy_csv, capsys):
        cfg = write_json(tmp_path / "c.json", {"train": {"total_iters": 5, "momentum": 0.9}})
        code = run_cli(["train", "--data", str(toy_csv), "--model", "nn", "--seed", "0", "--config", cfg, "--out-dir", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "momentum" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_out_of_range(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", {"train": {"warmup_fraction": 2.0}})
        assert run_cli(["train", "--data", str(toy_csv), "--model", "nn", "--seed", "0", "--config", cfg, "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_malformed_json(self, tmp_path, toy_csv):
        bad = tmp_path / "c.json"
        bad.write_text("{not json")
        assert run_cli(["train", "--data", str(toy_csv), "--model", "nn", "--seed", "0", "--config", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_required(self, tmp_path, toy_csv):
        assert run_cli(["train", "--data", str(toy_csv), "--model", "nn", "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_validate_config_direct(self):
        with pytest.raises(ConfigError):
            validate_config("vae", {"out_dir": "x", "seed": 0, "train": {"iters": 0}})
        doc = validate_config("vae", {"out_dir": "x", "seed": 0})
        assert doc["grid_n"] == 81

    def test_runtime_failure(self, tmp_path, capsys):
        code = run_cli(["train", "--data", str(tmp_path / "missing.csv"), "--model", "nn", "--seed", "0", "--out-dir", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert "missing.csv" in capsys.readouterr().err

    def test_bad_thread_env(self, tmp_path):
        env = {**os.environ, "VARNET_THREADS": "many"}
        out = subprocess.run(
            [sys.executable, "-m", "varnet.cli", "gen-data", "toy-sine", "--seed", "1", "--out", str(tmp_path / "x.csv")],
            env=env,
            capture_output=True,
            text=True,
        )
        assert out.returncode == EXIT_CONFIG and "VARNET_THREADS" in out.stderr

    def test_thread_env_accepted(self, tmp_path):
        env = {**os.environ, "VARNET_THREADS": "1"}
        out = subprocess.run(
            [sys.executable, "-m", "varnet.cli", "gen-data", "toy-sine", "--n", "10", "--seed", "1", "--out", str(tmp_path / "x.csv")],
            env=env,
            capture_output=True,
            text=True,
        )
        assert out.returncode == EXIT_OK


class TestPipeline:
    def test_train_eval_matches_in_process(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", SMALL_TRAIN)
        run_dir, ev_dir = tmp_path / "run", tmp_path / "ev"
        assert run_cli(["train", "--data", str(toy_csv), "--model", "combined", "--seed", "3", "--config", cfg, "--out-dir", str(run_dir)]) == EXIT_OK
        for name in ("snapshot.json", "report.json", "trace.csv", "curve.csv", "manifest.json"):
            assert (run_dir / name).exists()
        snap = run_dir / "snapshot.json"
        before = sha(snap)
        assert run_cli(["eval", "--snapshot", str(snap), "--data", str(toy_csv), "--out-dir", str(ev_dir)]) == EXIT_OK
        assert sha(snap) == before
        metrics = json.loads((ev_dir / "metrics.json").read_text())

        model, scaler = load_snapshot(snap)
        ds = load_csv(toy_csv)
        p = predict(model, scaler.transform_X(ds.X))
        ll = -np.asarray(student_t_nll(scaler.transform_y(ds.y), p.mu, p.alpha, p.beta)) - math.log(scaler.y_std)
        assert metrics["test_log_likelihood"] == pytest.approx(float(np.mean(ll)), abs=1e-12)

    def test_trace_csv_format(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", SMALL_TRAIN)
        run_cli(["train", "--data", str(toy_csv), "--model", "nn", "--seed", "3", "--config", cfg, "--out-dir", str(tmp_path / "r")])
        lines = (tmp_path / "r" / "trace.csv").read_text().splitlines()
        assert lines[0] == "iter,loss" and len(lines) == 201

    def test_regenerate_from_manifest(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", SMALL_TRAIN)
        first = tmp_path / "first"
        run_cli(["train", "--data", str(toy_csv), "--model", "combined", "--seed", "5", "--config", cfg, "--out-dir", str(first)])
        man = json.loads((first / "manifest.json").read_text())
        second = tmp_path / "second"
        replay = write_json(tmp_path / "replay.json", {**man["config"], "out_dir": str(second)})
        assert run_cli(["train", "--config", replay]) == EXIT_OK
        man2 = json.loads((second / "manifest.json").read_text())
        assert man2["outputs"] == man["outputs"]

    def test_calibration_training(self, tmp_path):
        data = tmp_path / "s.csv"
        run_cli(["gen-data", "seasonal", "--seed", "1", "--day-step", "30", "--n-years", "10", "--out", str(data)])
        cfg = write_json(tmp_path / "c.json", SMALL_TRAIN)
        assert run_cli(["train", "--data", str(data), "--calibration", "--model", "combined", "--seed", "0", "--config", cfg, "--out-dir", str(tmp_path / "r")]) == EXIT_OK

    def test_active_learn(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", {"train": {"total_iters": 20, "lr": 0.01}, "acquisition_fraction": 0.05})
        out = tmp_path / "al"
        assert run_cli(["active-learn", "--data", str(toy_csv), "--model", "nn", "--rounds", "2", "--repeats", "2", "--seed", "0", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
        lines = (out / "curves.csv").read_text().splitlines()
        assert lines[0] == "round,mean_rmse,se_rmse,mean_ll,se_ll" and len(lines) == 4

    def test_grad_study(self, tmp_path, toy_csv):
        cfg = write_json(tmp_path / "c.json", {"warmup_iters": 10, "study_iters": 5, "train": {"lr": 0.01}})
        out = tmp_path / "gs"
        assert run_cli(["grad-study", "--data", str(toy_csv), "--seed", "0", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
        assert set(json.loads((out / "summary.json").read_text())) == {"si_mean_locality", "si_mean_uniform", "si_var_locality", "si_var_uniform"}

    def test_vae(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"n_train": 60, "n_samples": 200, "grid_n": 21, "train": {"hidden": 6, "refresh_period": 10}})
        out = tmp_path / "v"
        assert run_cli(["vae", "--iters", "40", "--seed", "0", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"baseline", "comb"}
        grid = (out / "comb_grid.csv").read_text().splitlines()
        assert grid[0] == "z1,z2,variance" and len(grid) == 21 * 21 + 1
        assert len((out / "comb_samples.csv").read_text().splitlines()) == 201
