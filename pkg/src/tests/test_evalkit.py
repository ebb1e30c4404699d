from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import HELD_OUT
from egoworld.core.errors import DataError, NumericalError
from egoworld.core.evalkit import (
    PSNR_CAP, GaussianStats, MetricReport, ModelPredictor, OraclePredictor, ShuffledActionPredictor,
    StaticFramePredictor, baseline_predictors, eval_atomic, eval_horizon_curve, eval_single_step, frechet_distance,
    latent_mse, make_eval_item, psnr,
)
from egoworld.core.formats import DatasetReader
from egoworld.core.kinematics import ATOMIC_LABELS
from egoworld.core.models import RunResult
from egoworld.core.plots import plot_atomic_bars, plot_horizon_curve


def test_psnr_caps_identical_frames_and_matches_formula():
    a = np.zeros((4, 4, 3), dtype=np.uint8)
    assert psnr(a, a) == PSNR_CAP
    b = np.ones((4, 4, 3), dtype=np.uint8)
    assert psnr(a, b) == pytest.approx(10 * np.log10(255.0 ** 2))
    with pytest.raises(DataError):
        psnr(a, np.zeros((4, 4)))


def test_latent_mse():
    assert latent_mse(torch.zeros(2, 3), torch.full((2, 3), 2.0)) == 4.0
    with pytest.raises(DataError):
        latent_mse(torch.zeros(2, 3), torch.zeros(3, 2))


def test_frechet_distance_closed_forms():
    d = 5
    eye = np.eye(d)
    shift = np.arange(d, dtype=np.float64)
    assert frechet_distance(GaussianStats(np.zeros(d), eye), GaussianStats(shift, eye)) == pytest.approx(shift @ shift)
    assert frechet_distance(GaussianStats(np.zeros(d), eye), GaussianStats(np.zeros(d), 4 * eye)) == pytest.approx(d)
    x = np.random.default_rng(0).normal(size=(200, d))
    stats = GaussianStats.from_features(x)
    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-6)


def test_frechet_distance_rejects_invalid_statistics():
    with pytest.raises(NumericalError):
        frechet_distance(GaussianStats(np.zeros(2), np.diag([1.0, -1.0])), GaussianStats(np.zeros(2), np.eye(2)))
    with pytest.raises(NumericalError):
        GaussianStats(np.array([np.nan, 0.0]), np.eye(2))
    with pytest.raises(NumericalError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DataError):
        GaussianStats.from_features(np.zeros((1, 3)))
    with pytest.raises(DataError):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))


def test_report_aggregates_mean_and_stderr_over_samples(tmp_path):
    rows = pd.DataFrame([
        {"predictor": "model", "group": "1s", "sequence": seq, "sample": s, "psnr": 20.0 + s, "latent_mse": 0.1 * s}
        for seq in range(2) for s in range(3)
    ])
    report = MetricReport(protocol="single_step", rows=rows, labels={"context_frames": "3"})
    table = report.aggregate()
    assert len(table) == 1
    row = table.iloc[0]
    assert row["samples"] == 3
    assert row["psnr_mean"] == pytest.approx(21.0)
    assert row["psnr_stderr"] == pytest.approx(1.0 / np.sqrt(3))
    assert row["context_frames"] == "3"

    path = report.to_csv(tmp_path / "single_step.csv")
    assert pd.read_csv(path)["psnr_mean"].tolist() == pytest.approx([21.0])
    assert len(pd.read_csv(tmp_path / "single_step_samples.csv")) == 6
    both = MetricReport.concat([report, report])
    assert len(both.rows) == 12
    assert MetricReport(protocol="x").aggregate().empty


def test_static_and_oracle_predictors():
    context = torch.arange(3 * 2 * 2, dtype=torch.float32).reshape(3, 2, 2)
    targets = torch.ones(4, 2, 2)
    actions, skips = torch.zeros(4, 48), torch.full((4,), 0.25)
    g = torch.Generator().manual_seed(0)
    static = StaticFramePredictor().predict(context, actions, skips, targets, 2, g)
    assert static.shape == (2, 4, 2, 2) and torch.equal(static[1, 3], context[-1])
    oracle = OraclePredictor().predict(context, actions, skips, targets, 2, g)
    assert torch.equal(oracle[0], targets)


def test_eval_item_context_and_actions(tiny_world, tiny_dataset):
    traj = DatasetReader(tiny_dataset)[0]
    item = make_eval_item(traj, tiny_world, 5, [9, 13], "curve")
    assert item.context_index.tolist() == [3, 4, 5]
    assert item.actions.shape == (2, 48)
    assert item.timeskips.tolist() == pytest.approx([1.0, 1.0])
    early = make_eval_item(traj, tiny_world, 0, [4], "x")
    assert early.context_index.tolist() == [0]


def test_oracle_single_step_is_perfect(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    report = eval_single_step(tiny_world, OraclePredictor(), reader)
    assert set(report.rows["sequence"]) == set(range(len(HELD_OUT)))
    assert len(report.rows) == len(HELD_OUT) * tiny_world.cfg.eval.samples
    assert (report.rows["latent_mse"] == 0.0).all()
    assert (report.rows["psnr"] == PSNR_CAP).all()
    assert report.rows["group"].unique().tolist() == ["1s"]


def test_static_baseline_scores_worse_than_oracle(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    static = eval_single_step(tiny_world, StaticFramePredictor(), reader).aggregate()
    assert static.loc[0, "latent_mse_mean"] > 0.0
    assert static.loc[0, "psnr_mean"] < PSNR_CAP


def test_horizon_curve_groups_and_small_fd_population(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    result = RunResult(success=True, overall_message="")
    report = eval_horizon_curve(tiny_world, OraclePredictor(), reader, result=result)
    assert set(report.rows["group"]) == {"0s", "1s", "2s"}
    assert report.fd["fd"].isna().all()
    assert any(log["level"] == "WARN" for log in result.logs)
    table = report.aggregate()
    assert set(table["group"]) == {"0s", "1s", "2s"}
    assert "fd" in table.columns


def test_atomic_suite_reports_every_label_once(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    report = eval_atomic(tiny_world, OraclePredictor(), reader, indices=range(len(reader)))
    present = set(report.rows["group"])
    assert present <= set(ATOMIC_LABELS)
    assert present.isdisjoint(report.absent)
    assert present | set(report.absent) == set(ATOMIC_LABELS)


def test_model_predictor_runs_single_step(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    report = eval_single_step(tiny_world, ModelPredictor(tiny_world), reader, indices=[0])
    assert len(report.rows) == tiny_world.cfg.eval.samples
    assert np.isfinite(report.rows["latent_mse"]).all()


def test_baseline_predictors_share_a_pool(tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    names = [p.name for p in baseline_predictors(tiny_world, reader)]
    assert names == ["model", "shuffled", "static", "oracle"]
    with pytest.raises(DataError):
        ShuffledActionPredictor(tiny_world, np.zeros((0, 48)))


def test_plots_write_png_files(tmp_path, tiny_world, tiny_dataset):
    reader = DatasetReader(tiny_dataset)
    curve = eval_horizon_curve(tiny_world, StaticFramePredictor(), reader).aggregate()
    png = plot_horizon_curve(curve, tmp_path / "figs" / "curve.png")
    assert png.read_bytes()[:4] == b"\x89PNG"

    atomic = pd.DataFrame([
        {"predictor": "model", "group": "forward", "latent_mse_mean": 0.2, "latent_mse_stderr": 0.01},
        {"predictor": "static", "group": "forward", "latent_mse_mean": 0.3, "latent_mse_stderr": 0.02},
        {"predictor": "model", "group": "rotate_left", "latent_mse_mean": 0.1, "latent_mse_stderr": 0.01},
    ])
    bars = plot_atomic_bars(atomic, tmp_path / "bars.png")
    assert bars.exists()
    with pytest.raises(DataError):
        plot_horizon_curve(pd.DataFrame(), tmp_path / "empty.png")


def test_frechet_distance_from_many_samples():
    rng = np.random.default_rng(1)
    d, n = 4, 100_000
    base = GaussianStats.from_features(rng.normal(size=(n, d)))
    shifted = GaussianStats.from_features(rng.normal(size=(n, d)) + 1.0)
    wide = GaussianStats.from_features(rng.normal(size=(n, d)) * 2.0)
    assert frechet_distance(base, shifted) == pytest.approx(d, rel=0.05)
    assert frechet_distance(wide, base) == pytest.approx(d * (2.0 - 1.0) ** 2, rel=0.05)
