import json
from pathlib import Path

import numpy as np
import pytest

from brushrl.cli import run_command
from brushrl.config import RunConfig, save
from brushrl.envs import load_ppm


def toy_config(tmp_path, **kw) -> Path:
    base = dict(
        canvas_size=16,
        grid_size=8,
        color=False,
        episode_len=3,
        terminal_source="l2",
        preset="desk",
        batch_size=4,
        steps=2,
        n_actors=1,
        dataset="single_stroke",
        run_dir=str(tmp_path / "run"),
        checkpoint_every=1,
    )
    base.update(kw)
    path = tmp_path / "cfg.toml"
    save(RunConfig(**base), path)
    return path


class TestInfo:
    def test_scene_cardinality(self, capsys):
        assert run_command(["info", "--env", "scene"]) == 0
        assert "M = 589824" in capsys.readouterr().out

    def test_paint_cardinality(self, capsys):
        assert run_command(["info", "--env", "paint"]) == 0
        out = capsys.readouterr().out
        assert str(1024 * 1024 * 10 * 4 * 20**3 * 2) in out


class TestErrors:
    def test_unknown_subcommand(self, capsys):
        assert run_command(["frobnicate"]) != 0

    def test_missing_config(self, tmp_path, capsys):
        assert run_command(["train", "--config", str(tmp_path / "nope.toml")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("environment = \"voxels\"\n")
        assert run_command(["train", "--config", str(path)]) == 1


class TestTrain:
    def test_train_writes_artifacts(self, tmp_path):
        cfg = toy_config(tmp_path)
        assert run_command(["train", "--config", str(cfg)]) == 0
        run = tmp_path / "run"
        assert (run / "config.toml").exists()
        assert (run / "metrics.jsonl").exists()
        assert (run / "checkpoints" / "policy_final.ckpt").exists()
        rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
        assert all(r["kind"] == "policy" for r in rows)

    def test_refuses_nonempty_run_dir(self, tmp_path, capsys):
        cfg = toy_config(tmp_path)
        assert run_command(["train", "--config", str(cfg)]) == 0
        assert run_command(["train", "--config", str(cfg)]) == 1
        assert "--force" in capsys.readouterr().err
        assert run_command(["train", "--config", str(cfg), "--force"]) == 0

    def test_deterministic_metrics(self, tmp_path):
        cfg = toy_config(tmp_path)
        assert run_command(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "a")]) == 0
        assert run_command(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "metrics.jsonl").read_text()
        b = (tmp_path / "b" / "metrics.jsonl").read_text()
        assert a == b


class TestReconstructAndSample:
    def test_reconstruct_outputs(self, tmp_path):
        cfg = toy_config(tmp_path)
        assert run_command(["train", "--config", str(cfg)]) == 0
        ckpt = tmp_path / "run" / "checkpoints" / "policy_final.ckpt"
        out = tmp_path / "recon"
        assert (
            run_command(
                ["reconstruct", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out), "--count", "1"]
            )
            == 0
        )
        trace = (out / "recon_000_trace.txt").read_text().splitlines()
        assert len(trace) == 3  # one action per step
        assert all("end_point=" in line and "kind=" in line for line in trace)
        native = load_ppm(out / "recon_000.ppm")
        big = load_ppm(out / "recon_000_4x.ppm")
        assert native.shape[0] * 4 == big.shape[0]

    def test_sample_outputs(self, tmp_path):
        cfg = toy_config(tmp_path, condition=False)
        assert run_command(["train", "--config", str(cfg)]) == 0
        ckpt = tmp_path / "run" / "checkpoints" / "policy_final.ckpt"
        out = tmp_path / "samples"
        assert (
            run_command(
                ["sample", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out), "--count", "2"]
            )
            == 0
        )
        assert (out / "sample_001.ppm").exists()
        assert (out / "sample_001_trace.txt").exists()

    def test_checkpoint_shape_mismatch_reported(self, tmp_path, capsys):
        cfg = toy_config(tmp_path)
        assert run_command(["train", "--config", str(cfg)]) == 0
        other = toy_config(tmp_path, run_dir=str(tmp_path / "run2"), grid_size=16)
        ckpt = tmp_path / "run" / "checkpoints" / "policy_final.ckpt"
        code = run_command(
            ["reconstruct", "--config", str(other), "--checkpoint", str(ckpt), "--out", str(tmp_path / "x")]
        )
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err


class TestMcmcCommand:
    def test_emits_energy_csv(self, tmp_path):
        out = tmp_path / "mc"
        assert run_command(["mcmc", "--out", str(out), "--iters", "500", "--seed", "3"]) == 0
        lines = (out / "energy_history.csv").read_text().splitlines()
        assert lines[0] == "step,frames,l2"
        assert len(lines) >= 2
        assert (out / "target.ppm").exists() and (out / "best.ppm").exists()


class TestDiscSurfaceCommand:
    def test_emits_fields(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run_command(["disc-surface", "--out", str(out), "--train-steps", "5"]) == 0
        assert (out / "l2_surface.csv").exists()
        assert (out / "disc_surface.csv").exists()
        assert "distinct values" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert run_command(["gradcheck"]) == 0
        assert "worst" in capsys.readouterr().out
