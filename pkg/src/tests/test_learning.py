from __future__ import annotations

import numpy as np
import pytest

from conftest import tiny_config
from egoworld.core.config import load_config
from egoworld.core.engine import fit
from egoworld.core.evalkit import MetricReport, baseline_predictors, eval_single_step
from egoworld.core.formats import DatasetReader, split_indices, write_dataset
from egoworld.core.synthworld import generate_dataset


@pytest.mark.slow
def test_trained_model_beats_static_and_shuffled_baselines(tmp_path):
    """Default size-S model, 200 trajectories of 64x64 frames at 4 FPS, 2000 steps."""
    cfg = load_config(None, {"data.workers": 4})
    trajectories, _ = generate_dataset(cfg.data)
    data = tmp_path / "dataset.bin"
    write_dataset(trajectories, data, seed=cfg.data.seed)

    world = fit(cfg, data, tmp_path / "run").world
    reader = DatasetReader(data)
    _, held = split_indices(reader.traj_ids(), cfg.eval.train_fraction)
    predictors = baseline_predictors(world, reader, held)
    table = MetricReport.concat([eval_single_step(world, p, reader, held) for p in predictors]).aggregate()
    scores = table.set_index("predictor")

    assert scores.loc["model", "psnr_mean"] >= scores.loc["static", "psnr_mean"] + 1.5
    assert scores.loc["model", "latent_mse_mean"] <= 0.9 * scores.loc["shuffled", "latent_mse_mean"]


@pytest.mark.slow
def test_short_training_run_reduces_the_loss(tmp_path):
    """Tiny model, 10 trajectories, 200 steps: late loss at least 20% below early loss."""
    cfg = tiny_config(**{"data.trajectories": 10, "data.frames": 48, "train.steps": 200, "train.batch_size": 8,
                         "train.lr": 1e-3, "train.log_every": 10, "train.checkpoint_every": 100})
    trajectories, _ = generate_dataset(cfg.data)
    data = tmp_path / "dataset.bin"
    write_dataset(trajectories, data, seed=cfg.data.seed)

    history = np.asarray(fit(cfg, data, tmp_path / "run").loss_history)
    assert len(history) == 200 and np.isfinite(history).all()
    assert history[-10:].mean() <= 0.8 * history[:10].mean()
