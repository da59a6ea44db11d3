"""CLI surface and experiment runner behaviour."""

import json
import os

import pytest

from sflsim.cli import main
from sflsim.config import parse_config
from sflsim.experiment import run_experiment


def write_tiny_config(tmp_path, out_dir, variants="scala", rounds=4, seed=0):
    path = tmp_path / "cfg.ini"
    path.write_text(
        "[dataset]\n"
        "classes = 3\n"
        "dim = 6\n"
        "per_class = 30\n"
        "separation = 3.0\n"
        "[partition]\n"
        "scheme = quantity\n"
        "alpha = 2\n"
        "[model]\n"
        "hidden = 6\n"
        "cut_index = 1\n"
        "[protocol]\n"
        f"variants = {variants}\n"
        "clients = 3\n"
        "rho = 1.0\n"
        "batch_size = 30\n"
        "local_iters = 2\n"
        f"rounds = {rounds}\n"
        "eta = 0.05\n"
        "[run]\n"
        f"seed = {seed}\n"
        "eval_period = 2\n"
        "eval_per_class = 10\n"
        f"out_dir = {out_dir}\n"
    )
    return path


class TestRunCommand:
    def test_run_writes_all_declared_outputs(self, tmp_path, capsys):
        cfg_path = write_tiny_config(tmp_path, tmp_path / "out")
        assert main(["run", "--config", str(cfg_path)]) == 0
        out = tmp_path / "out"
        assert (out / "scala.csv").exists()
        assert (out / "scala.ndjson").exists()
        assert (out / "partition.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        for paths in manifest["variant_files"].values():
            for p in paths.values():
                assert os.path.exists(p)

    def test_variant_sweep_shares_round_grid(self, tmp_path):
        cfg_path = write_tiny_config(
            tmp_path, tmp_path / "out", variants="scala,splitfed_v1"
        )
        assert main(["run", "--config", str(cfg_path)]) == 0
        out = tmp_path / "out"
        scala_rows = (out / "scala.csv").read_text().strip().split("\n")
        split_rows = (out / "splitfed_v1.csv").read_text().strip().split("\n")
        scala_t = [r.split(",")[0] for r in scala_rows[1:]]
        split_t = [r.split(",")[0] for r in split_rows[1:]]
        assert scala_t == split_t == [str(t) for t in range(1, 5)]

    def test_zero_rounds_still_succeeds(self, tmp_path):
        cfg_path = write_tiny_config(tmp_path, tmp_path / "out", rounds=0)
        assert main(["run", "--config", str(cfg_path)]) == 0
        rows = (tmp_path / "out" / "scala.csv").read_text().strip().split("\n")
        assert len(rows) == 1  # header only

    def test_identical_seed_byte_identical_metrics(self, tmp_path):
        a = write_tiny_config(tmp_path, tmp_path / "a", rounds=5)
        b = tmp_path / "cfg_b.ini"
        b.write_text(a.read_text().replace(str(tmp_path / "a"), str(tmp_path / "b")))
        assert main(["run", "--config", str(a)]) == 0
        assert main(["run", "--config", str(b)]) == 0
        for name in ("scala.csv", "scala.ndjson", "partition.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[protocol]\nrho = 0\n")
        assert main(["run", "--config", str(bad)]) == 1
        assert "config error" in capsys.readouterr().err

    def test_cli_overrides(self, tmp_path):
        cfg_path = write_tiny_config(tmp_path, tmp_path / "ignored")
        out = tmp_path / "cli_out"
        assert (
            main(
                [
                    "run",
                    "--config",
                    str(cfg_path),
                    "--variant",
                    "fedavg",
                    "--seed",
                    "5",
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        assert (out / "fedavg.csv").exists()
        assert not (out / "scala.csv").exists()

    def test_outputs_stay_inside_out_dir(self, tmp_path, monkeypatch):
        workdir = tmp_path / "work"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        cfg_path = write_tiny_config(tmp_path, "results")
        assert main(["run", "--config", str(cfg_path)]) == 0
        created = {p.name for p in workdir.iterdir()}
        assert created == {"results"}


class TestTheoryCommand:
    def test_passes_by_default(self, tmp_path, capsys):
        assert main(["theory-check", "--out", str(tmp_path)]) == 0
        assert "all ordering assertions passed" in capsys.readouterr().out
        assert (tmp_path / "theory_report.csv").exists()

    def test_uniform_only_grid_passes(self, tmp_path):
        assert (
            main(
                [
                    "theory-check",
                    "--classes",
                    "4",
                    "--grid",
                    "0.25",
                    "--out",
                    str(tmp_path),
                ]
            )
            == 0
        )

    def test_negative_control_fails_with_exit_3(self, tmp_path, capsys):
        code = main(["theory-check", "--negative-control", "--out", str(tmp_path)])
        assert code == 3
        assert "FAIL" in capsys.readouterr().out

    def test_bad_grid_is_config_error(self, tmp_path):
        assert main(["theory-check", "--grid", "1.5", "--out", str(tmp_path)]) == 1


class TestPartitionCommand:
    def test_inspect_prints_summary(self, tmp_path, capsys):
        cfg_path = write_tiny_config(tmp_path, tmp_path / "out")
        main(["run", "--config", str(cfg_path)])
        manifest = tmp_path / "out" / "partition.json"
        assert main(["partition", "--inspect", str(manifest)]) == 0
        out = capsys.readouterr().out
        assert "clients: 3" in out
        assert "client 0:" in out

    def test_missing_manifest_is_runtime_error(self, tmp_path):
        assert main(["partition", "--inspect", str(tmp_path / "nope.json")]) == 2


class TestRunExperimentApi:
    def test_manifest_lists_existing_files(self, tmp_path):
        cfg = parse_config(
            overrides={
                "classes": 3,
                "dim": 5,
                "per_class": 20,
                "clients": 3,
                "rho": 1.0,
                "batch_size": 20,
                "local_iters": 1,
                "rounds": 2,
                "eval_per_class": 5,
                "out_dir": str(tmp_path / "exp"),
                "hidden": (6,),
                "cut_index": 1,
            }
        )
        manifest = run_experiment(cfg)
        assert manifest.version
        for paths in manifest.variant_files.values():
            for p in paths.values():
                assert os.path.exists(p)
