from __future__ import annotations

import json
from pathlib import Path

import pandas as pd
import pytest
import torch

from conftest import tiny_config, write_tiny_yaml
from egoworld import app
from egoworld.cli import (DATASET_NAME, EXIT_DATA, EXIT_OK, EXIT_USAGE, MANIFEST_NAME, THREADS_ENV,
                          configure_threads, run)
from egoworld.core.config import config_hash, dump_config, load_config
from egoworld.core.errors import ConfigError
from egoworld.core.kinematics import ATOMIC_LABELS


def _manifest(out: Path) -> dict:
    return json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))


# ---------------- Configuration ----------------

def test_defaults_and_overrides():
    cfg = load_config(None, {"model.context_frames": 5, "train.betas": [0.9, 0.99]})
    assert cfg.model.context_frames == 5
    assert cfg.train.betas == [0.9, 0.99]
    assert cfg.data.fps == 4.0 and cfg.diffusion.steps == 1000


def test_yaml_sections_merge_over_defaults(tmp_path):
    path = write_tiny_yaml(tmp_path / "tiny.yaml", **{"plan.arm": "left"})
    cfg = load_config(str(path))
    assert cfg.data.resolution == 8 and cfg.model.width == 32 and cfg.plan.arm == "left"
    assert cfg.eval.train_fraction == 0.8


def test_unknown_keys_and_bad_values_are_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  widht: 32\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(bad))
    assert info.value.line == 2
    with pytest.raises(ConfigError) as info:
        load_config(None, {"model.context_frames": 2})
    assert info.value.field == "model.context_frames"
    with pytest.raises(ConfigError):
        load_config(None, {"model.context_frames": 4, "model.sequence_frames": 4})
    with pytest.raises(ConfigError):
        load_config(None, {"data.resolution": 9})
    with pytest.raises(ConfigError):
        load_config(None, {"model.width": 30, "model.heads": 4})
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))


def test_invalid_yaml_reports_its_line(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("data:\n  seed: 1\n model: [\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert info.value.line is not None


def test_config_hash_tracks_content():
    a, b = tiny_config(), tiny_config()
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(tiny_config(**{"train.seed": 1}))
    assert "context_frames: 3" in dump_config(a)


# ---------------- Command line ----------------

def test_gen_data_is_reproducible(tmp_path):
    yaml_path = write_tiny_yaml(tmp_path / "tiny.yaml", **{"data.trajectories": 2})
    sums = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["gen-data", "--config", str(yaml_path), "--out", str(out)]) == EXIT_OK
        manifest = _manifest(out)
        assert manifest["exit_code"] == 0 and manifest["command"] == "gen-data"
        assert Path(manifest["outputs"]["dataset"]) == out / DATASET_NAME
        assert (out / "config.resolved.yaml").exists()
        sums.append(manifest["summary"]["sha256"])
    assert sums[0] == sums[1]
    assert _manifest(tmp_path / "a")["config_hash"] == config_hash(load_config(str(yaml_path)))


def test_usage_errors_exit_with_one(tmp_path):
    assert run(["train", "--data", "x.bin"]) == EXIT_USAGE
    assert run(["no-such-command"]) == EXIT_USAGE
    out = tmp_path / "g"
    assert run(["gen-data", "--out", str(out), "--set", "model.widht=32"]) == EXIT_USAGE
    assert _manifest(out)["exit_code"] == EXIT_USAGE


def test_missing_inputs_exit_with_two_and_keep_a_manifest(tmp_path, tiny_dataset):
    out = tmp_path / "eval"
    code = run(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tiny_dataset), "--out", str(out)])
    assert code == EXIT_DATA
    manifest = _manifest(out)
    assert manifest["exit_code"] == EXIT_DATA
    assert "Checkpoint not found" in manifest["message"]

    out = tmp_path / "train"
    assert run(["train", "--data", str(tmp_path / "none.bin"), "--out", str(out)]) == EXIT_DATA
    assert "Dataset not found" in _manifest(out)["message"]


def test_rollout_rejects_zero_steps(tmp_path, tiny_dataset):
    code = run(["rollout", "--checkpoint", "x", "--data", str(tiny_dataset), "--start", "0:3",
                "--steps", "0", "--out", str(tmp_path / "r")])
    assert code == EXIT_USAGE


def test_thread_override_is_validated():
    assert configure_threads({}) is None
    with pytest.raises(ConfigError):
        configure_threads({THREADS_ENV: "many"})
    with pytest.raises(ConfigError):
        configure_threads({THREADS_ENV: "0"})
    before = torch.get_num_threads()
    try:
        assert configure_threads({THREADS_ENV: "1"}) == 1
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_selftest_entrypoints_pass(capsys):
    assert app.main(["--selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert run(["selftest"]) == EXIT_OK


def test_end_to_end_pipeline(tmp_path):
    yaml_path = write_tiny_yaml(tmp_path / "tiny.yaml")
    cfg = ["--config", str(yaml_path)]
    data_dir = tmp_path / "data"
    assert run(["gen-data", *cfg, "--out", str(data_dir)]) == EXIT_OK
    data = str(data_dir / DATASET_NAME)

    assert run(["train", *cfg, "--data", data, "--out", str(tmp_path / "train")]) == EXIT_OK
    ckpt = _manifest(tmp_path / "train")["outputs"]["checkpoint_last"]
    assert Path(ckpt, "manifest.txt").exists()

    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "eval")]) == EXIT_OK
    single = pd.read_csv(tmp_path / "eval" / "single_step.csv")
    assert {"model", "static", "oracle"} <= set(single["predictor"])
    assert (tmp_path / "eval" / "horizon_curve.png").exists()

    assert run(["rollout", "--checkpoint", ckpt, "--data", data, "--start", "2:5", "--steps", "2",
                "--out", str(tmp_path / "rollout")]) == EXIT_OK
    rows = pd.read_csv(tmp_path / "rollout" / "rollout.csv")
    assert rows["frame"].tolist() == [9, 13]
    assert (tmp_path / "rollout" / "pred_01.png").exists() and (tmp_path / "rollout" / "rollout_strip.png").exists()

    assert run(["plan", "--checkpoint", ckpt, "--data", data, "--context", "2:5", "--goal", "2:9",
                "--iters", "1", "--pop", "4", "--horizon", "2", "--out", str(tmp_path / "plan")]) == EXIT_OK
    ranking = pd.read_csv(tmp_path / "plan" / "candidates.csv")
    assert set(ranking["candidate"]) == {"best", "final_mean", "still"}
    assert (tmp_path / "plan" / "best_actions.csv").exists()

    assert run(["atomic-extract", *cfg, "--data", data, "--out", str(tmp_path / "atomic")]) == EXIT_OK
    counts = pd.read_csv(tmp_path / "atomic" / "label_counts.csv")
    assert counts["label"].tolist() == list(ATOMIC_LABELS)
    assert (counts["kept"] <= counts["found"]).all()

    figure = tmp_path / "figs" / "curve.png"
    assert run(["plot", "--report", str(tmp_path / "eval" / "horizon.csv"), "--out", str(figure)]) == EXIT_OK
    assert figure.exists()
