"""Run configuration parsing and the command-line interface."""

import json
import subprocess
import sys

import numpy as np
import pytest

from dms import artifacts
from dms.cli import run_command
from dms.config import RUN_SCHEMA, ConfigError, dumps_config, parse_config
from dms.network import build_supernet
from dms.resource import synthesize_latency_table, write_latency_table

MINIMAL = {
    "model": {"input_dim": 10, "input_search": {}, "layers": [
        {"kind": "linear", "out": 32, "search": {}},
        {"kind": "linear", "out": 32, "search": {}},
        {"kind": "linear", "out": 3, "act": "none"}]},
    "task": {"kind": "planted-features", "input_dim": 10, "informative": 3, "classes": 3,
             "n_train": 256, "n_val": 64, "n_test": 64, "seed": 5},
    "resource": {"kind": "macs", "target_ratio": 0.5},
}
FAST = {"search_epochs": 4, "retrain_epochs": 2, "batch_size": 32, "lr_structure": 0.02}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def fast_config(tmp_path, **kw):
    return write(tmp_path / "run.json", {**MINIMAL, "hyperparams": dict(FAST), **kw})


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write(base / "run.json", {**MINIMAL, "hyperparams": FAST, "compare_uniform": True})
    assert run_command(["search", "--config", cfg, "--out", str(base / "run")]) == 0
    return base / "run"


class TestParseConfig:
    def test_defaults_echoed(self, tmp_path):
        cfg = parse_config(write(tmp_path / "c.json", MINIMAL))
        echoed = json.loads(dumps_config(cfg))
        hp = echoed["hyperparams"]
        assert (hp["lambda_resource"], hp["lr_structure"], hp["decay"]) == (1.0, 0.005, 0.99)
        assert hp["width_only_epochs"] == 2
        assert echoed["schema_version"] == RUN_SCHEMA
        assert echoed["pipeline"] == "np"

    def test_round_trip(self, tmp_path):
        cfg = parse_config(write(tmp_path / "c.json", MINIMAL))
        (tmp_path / "echo.json").write_text(dumps_config(cfg))
        again = parse_config(str(tmp_path / "echo.json"))
        assert again == cfg
        assert dumps_config(again) == dumps_config(cfg)

    @pytest.mark.parametrize("mutate,path", [
        (lambda c: c.update(hyperparams={"lr_strucutre": 0.1}), "hyperparams.lr_strucutre"),
        (lambda c: c.update(hyperparams={"search_epochs": "5"}), "hyperparams.search_epochs"),
        (lambda c: c["model"]["layers"][0].update(act="gelu"), "model.layers.0.linear.act"),
        (lambda c: c["resource"].pop("target_ratio"), "resource"),
        (lambda c: c.pop("task"), "task"),
    ])
    def test_rejections_name_the_key(self, tmp_path, mutate, path):
        cfg = json.loads(json.dumps(MINIMAL))
        mutate(cfg)
        with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
            parse_config(write(tmp_path / "c.json", cfg))

    def test_p_minus_without_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError, match="checkpoint"):
            parse_config(write(tmp_path / "c.json", {**MINIMAL, "pipeline": "p-"}))

    def test_foreign_schema(self, tmp_path):
        with pytest.raises(ConfigError, match="schema"):
            parse_config(write(tmp_path / "c.json", {**MINIMAL, "schema_version": "dms.run/0"}))

    def test_not_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{model: ")
        with pytest.raises(ConfigError, match="JSON"):
            parse_config(str(tmp_path / "c.json"))

    def test_relative_paths_resolve_against_config(self, tmp_path):
        sub = tmp_path / "cfgs"
        sub.mkdir()
        cfg = parse_config(write(sub / "c.json", {**MINIMAL, "pipeline": "p", "checkpoint": "pre.npz"}))
        assert cfg.checkpoint == str(sub / "pre.npz")


class TestSearchCommand:
    def test_run_directory_contents(self, run_dir):
        for name in ("config.json", "architecture.json", "metrics.jsonl", "supernet.npz", "model.npz",
                     "report.json"):
            assert (run_dir / name).exists(), name
        assert not (run_dir / ".lock").exists()
        assert len(artifacts.read_metrics(run_dir / "metrics.jsonl")) == 4

    def test_eval_needs_only_the_run_directory(self, run_dir, capsys):
        assert run_command(["eval", "--run", str(run_dir)]) == 0
        got = json.loads(capsys.readouterr().out)["test"]
        report = json.loads((run_dir / "report.json").read_text())
        assert got == report["searched"]["test"]

    def test_export_matches_search(self, run_dir, tmp_path):
        out = tmp_path / "arch.json"
        assert run_command(["export", "--checkpoint", str(run_dir / "supernet.npz"), "--out", str(out)]) == 0
        exported = json.loads(out.read_text())["dims"]
        assert exported == json.loads((run_dir / "architecture.json").read_text())["dims"]

    def test_report_is_byte_identical(self, run_dir, tmp_path, capsys):
        outs = []
        for i in range(2):
            assert run_command(["report", str(run_dir), str(run_dir), "--out", str(tmp_path / f"r{i}.txt")]) == 0
            outs.append((tmp_path / f"r{i}.txt").read_bytes())
        assert outs[0] == outs[1]
        text = outs[0].decode()
        assert "searched" in text and "uniform" in text and "median delta" in text

    def test_retrain_writes_model(self, run_dir, capsys):
        assert run_command(["retrain", "--run", str(run_dir), "--epochs", "1"]) == 0
        assert "test" in json.loads(capsys.readouterr().out)
        assert (run_dir / "retrain.json").exists()

    def test_target_miss_exits_2(self, tmp_path, capsys):
        cfg = fast_config(tmp_path, hyperparams={**FAST, "lr_structure": 1e-5, "search_epochs": 2})
        assert run_command(["search", "--config", cfg, "--out", str(tmp_path / "miss")]) == 2
        assert "final r_c" in capsys.readouterr().err

    def test_invalid_config_exits_1(self, tmp_path, capsys):
        cfg = write(tmp_path / "bad.json", {**MINIMAL, "budget": 3})
        assert run_command(["search", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
        assert "budget" in capsys.readouterr().err

    def test_locked_directory(self, tmp_path, capsys):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").write_text("1")
        assert run_command(["search", "--config", fast_config(tmp_path), "--out", str(out)]) == 1
        assert "locked" in capsys.readouterr().err

    def test_pretrain_then_structure_only(self, tmp_path):
        cfg = fast_config(tmp_path)
        pre = tmp_path / "pre.npz"
        assert run_command(["pretrain", "--config", cfg, "--epochs", "1", "--out", str(pre)]) == 0
        before = artifacts.file_digest(pre)
        p_minus = fast_config(tmp_path, pipeline="p-", checkpoint=str(pre))
        assert run_command(["search", "--config", p_minus, "--out", str(tmp_path / "pm")]) == 0
        assert artifacts.file_digest(pre) == before


class TestOtherCommands:
    def test_fit_latency(self, tmp_path, capsys):
        model = build_supernet(MINIMAL["model"])
        write_latency_table(tmp_path / "lat.csv", synthesize_latency_table(model, seed=1))
        out = tmp_path / "fit.json"
        assert run_command(["fit-latency", "--table", str(tmp_path / "lat.csv"), "--out", str(out)]) == 0
        fits = json.loads(out.read_text())
        assert set(fits) == {"layers.0", "layers.1", "layers.2"}
        assert all(f["r2"] > 0.95 for f in fits.values())

    def test_latency_config_uses_fit_file(self, tmp_path):
        model = build_supernet(MINIMAL["model"])
        write_latency_table(tmp_path / "lat.csv", synthesize_latency_table(model, seed=1))
        run_command(["fit-latency", "--table", str(tmp_path / "lat.csv"), "--out", str(tmp_path / "fit.json")])
        cfg = fast_config(tmp_path, resource={"kind": "latency", "target_ratio": 0.6, "latency_fit": "fit.json"},
                          hyperparams={**FAST, "search_epochs": 10})
        assert run_command(["search", "--config", cfg, "--out", str(tmp_path / "lat")]) == 0

    def test_gradcheck(self, capsys):
        assert run_command(["gradcheck", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        err = float(out.strip().splitlines()[-1].split()[-1])
        assert err < 1e-5

    def test_missing_file(self, tmp_path, capsys):
        assert run_command(["fit-latency", "--table", str(tmp_path / "none.csv"), "--out", "x"]) == 1

    def test_foreign_checkpoint(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        assert run_command(["export", "--checkpoint", str(tmp_path / "x.npz"), "--out", str(tmp_path / "a")]) == 1

    def test_unknown_subcommand(self, capsys):
        assert run_command(["frobnicate"]) != 0
        assert "usage" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "dms", "bogus"], capture_output=True, text=True)
        assert proc.returncode != 0
        assert "usage" in proc.stderr
        proc = subprocess.run([sys.executable, "-m", "dms", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout
