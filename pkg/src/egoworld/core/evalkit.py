"""EgoWorld core: evaluation protocols.

Single-step prediction a fixed horizon ahead, autoregressive horizon curves and per-label
atomic-action suites. Every protocol scores a Predictor (the trained model or one of the
reference baselines) with PSNR on decoded frames and MSE on codec latents, over a fixed
number of stochastic samples per sequence. Horizon curves also report a Frechet distance
between pooled latent features of predicted and real frame populations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import linalg
from tqdm import tqdm

from .config import RunConfig
from .engine import WorldModel, rollout
from .errors import DataError, NumericalError
from .formats import DatasetReader, atomic_write_bytes, split_indices
from .kinematics import (ACTION_DIM, ATOMIC_LABELS, AtomicThresholds, KinematicsEvents, balance_segments,
                         compute_action, extract_atomic_segments)
from .models import AtomicSegment, RunResult, Trajectory

LOGGER = "egoworld.evalkit"
PSNR_CAP = 99.0
PSD_TOLERANCE = 1e-6


# ---------------- Metrics ----------------

def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"PSNR inputs differ in shape: {a.shape} vs {b.shape}.")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_value ** 2 / mse)))


def latent_mse(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise DataError(f"Latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}.")
    return float(torch.mean((a.double() - b.double()) ** 2).item())


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d)

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise NumericalError("Gaussian statistics contain NaN or Inf.")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise DataError("Covariance shape does not match the mean.")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise NumericalError("Covariance is not symmetric.")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "GaussianStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise DataError("Need at least two feature rows (M, d) to fit Gaussian statistics.")
        cov = np.cov(x, rowvar=False)
        return cls(mean=x.mean(axis=0), cov=np.atleast_2d(0.5 * (cov + cov.T)))


def _psd_sqrt(m: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric square root via eigendecomposition; returns (sqrt, clipped eigenvalues)."""
    w, v = linalg.eigh(0.5 * (m + m.T))
    tol = PSD_TOLERANCE * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and float(w.min()) < -tol:
        raise NumericalError(f"{name} is not positive semidefinite (min eigenvalue {float(w.min()):.3g}).")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, w


def frechet_distance(sa: GaussianStats, sb: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    tr (S_a S_b)^(1/2) is computed as tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), which only needs
    symmetric eigendecompositions.
    """
    if sa.mean.shape != sb.mean.shape:
        raise DataError("Frechet distance needs statistics of equal dimension.")
    root_a, _ = _psd_sqrt(sa.cov, "Covariance A")
    _psd_sqrt(sb.cov, "Covariance B")
    _, w = _psd_sqrt(root_a @ sb.cov @ root_a, "Covariance product")
    diff = sa.mean - sb.mean
    return float(diff @ diff + np.trace(sa.cov) + np.trace(sb.cov) - 2.0 * np.sqrt(w).sum())


# ---------------- Predictors ----------------

class Predictor:
    """Predicts (samples, A, N, C) latents from a clean context (F, N, C) and A actions."""

    name = "predictor"

    def predict(self, context: torch.Tensor, actions: torch.Tensor, timeskips: torch.Tensor,
                targets: torch.Tensor, samples: int, generator: torch.Generator) -> torch.Tensor:
        raise NotImplementedError


class ModelPredictor(Predictor):
    name = "model"

    def __init__(self, world: WorldModel):
        self.world = world

    def predict(self, context, actions, timeskips, targets, samples, generator):
        return rollout(self.world, context[None].expand(samples, -1, -1, -1),
                       actions[None].expand(samples, -1, -1), timeskips[None].expand(samples, -1),
                       generator=generator)


class StaticFramePredictor(Predictor):
    """Repeats the last context frame."""

    name = "static"

    def predict(self, context, actions, timeskips, targets, samples, generator):
        return context[-1][None, None].expand(samples, actions.shape[0], -1, -1).clone()


class ShuffledActionPredictor(ModelPredictor):
    """The trained model conditioned on actions drawn from other sequences."""

    name = "shuffled"

    def __init__(self, world: WorldModel, pool: np.ndarray, seed: int = 0):
        super().__init__(world)
        if len(pool) == 0:
            raise DataError("Shuffled-action baseline needs a nonempty action pool.")
        self.pool = np.asarray(pool, dtype=np.float64)
        self.rng = np.random.default_rng(seed)

    def predict(self, context, actions, timeskips, targets, samples, generator):
        picks = self.rng.integers(0, len(self.pool), size=actions.shape[0])
        shuffled = torch.as_tensor(self.pool[picks], dtype=actions.dtype)
        return super().predict(context, shuffled, timeskips, targets, samples, generator)


class OraclePredictor(Predictor):
    name = "oracle"

    def predict(self, context, actions, timeskips, targets, samples, generator):
        return targets[None].expand(samples, -1, -1, -1).clone()


# ---------------- Reports ----------------

ROW_COLUMNS = ["predictor", "group", "sequence", "sample", "psnr", "latent_mse"]
FD_COLUMNS = ["predictor", "group", "fd", "frames"]


@dataclass
class MetricReport:
    protocol: str
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=ROW_COLUMNS))
    fd: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=FD_COLUMNS))
    skipped: int = 0
    absent: List[str] = field(default_factory=list)
    labels: Dict[str, str] = field(default_factory=dict)

    def aggregate(self) -> pd.DataFrame:
        """Per (predictor, group): mean and standard error over the per-sample means."""
        cols = ["predictor", "group", "samples", "psnr_mean", "psnr_stderr", "latent_mse_mean", "latent_mse_stderr"]
        if self.rows.empty:
            return pd.DataFrame(columns=cols)
        per_sample = self.rows.groupby(["predictor", "group", "sample"], sort=False)[["psnr", "latent_mse"]].mean()
        out = []
        for (pred, group), chunk in per_sample.groupby(level=[0, 1], sort=False):
            n = len(chunk)
            row = {"predictor": pred, "group": group, "samples": n}
            for metric in ("psnr", "latent_mse"):
                values = chunk[metric].to_numpy(dtype=np.float64)
                row[f"{metric}_mean"] = float(values.mean())
                row[f"{metric}_stderr"] = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            out.append(row)
        table = pd.DataFrame(out, columns=cols)
        if not self.fd.empty:
            table = table.merge(self.fd, on=["predictor", "group"], how="left")
        for key, value in self.labels.items():
            table[key] = value
        return table

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        atomic_write_bytes(path, self.aggregate().to_csv(index=False).encode("utf-8"))
        atomic_write_bytes(path.with_name(path.stem + "_samples.csv"), self.rows.to_csv(index=False).encode("utf-8"))
        return path

    @staticmethod
    def concat(reports: Sequence["MetricReport"]) -> "MetricReport":
        if not reports:
            raise DataError("Nothing to concatenate.")
        first = reports[0]
        rows = [r.rows for r in reports if not r.rows.empty]
        fds = [r.fd for r in reports if not r.fd.empty]
        return MetricReport(
            protocol=first.protocol,
            rows=pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=ROW_COLUMNS),
            fd=pd.concat(fds, ignore_index=True) if fds else pd.DataFrame(columns=FD_COLUMNS),
            skipped=first.skipped, absent=list(first.absent), labels=dict(first.labels),
        )


@dataclass
class EvalResult(RunResult):
    reports: Dict[str, MetricReport] = field(default_factory=dict)


def config_labels(cfg: RunConfig) -> Dict[str, str]:
    return {"context_frames": str(cfg.model.context_frames), "action_conditioning": cfg.model.action_conditioning}


# ---------------- Protocol plumbing ----------------

@dataclass
class EvalItem:
    traj_id: int
    group: str
    context_index: np.ndarray  # frame indices of the clean context, oldest first
    target_index: np.ndarray  # frame indices of the targets, one per action
    actions: np.ndarray  # (A, 48) normalized
    timeskips: np.ndarray  # (A,)


def make_eval_item(traj: Trajectory, world: WorldModel, last_context: int, targets: Sequence[int], group: str,
                   events: Optional[KinematicsEvents] = None) -> EvalItem:
    """Clean context ending at `last_context` plus the actions chaining it to each target frame."""
    k = world.context_frames
    context = np.arange(max(0, last_context - k + 1), last_context + 1)
    chain = [last_context, *targets]
    acts = [compute_action(traj.poses[a], traj.poses[b], world.bounds, events=events) for a, b in zip(chain[:-1], chain[1:])]
    return EvalItem(traj_id=traj.traj_id, group=group, context_index=context, target_index=np.asarray(targets),
                    actions=np.stack([a.values for a in acts]) if acts else np.zeros((0, ACTION_DIM)),
                    timeskips=np.array([a.timeskip for a in acts]))


def action_pool(items: Sequence[EvalItem]) -> np.ndarray:
    rows = [it.actions for it in items if len(it.actions)]
    return np.concatenate(rows) if rows else np.zeros((0, ACTION_DIM))


def _score(items: Sequence[EvalItem], reader_lookup: Dict[int, Trajectory], world: WorldModel, predictor: Predictor,
           samples: int, seed: int, report: MetricReport, progress: bool = False,
           horizon_groups: Optional[Sequence[str]] = None) -> Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]]:
    """Score every item; returns per-group (predicted, real) pooled latent features."""
    rows = []
    features: Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]] = {}
    fd_grid = world.cfg.eval.fd_grid
    for seq, item in enumerate(tqdm(items, desc=f"eval[{predictor.name}]", disable=not progress, leave=False)):
        traj = reader_lookup[item.traj_id]
        context = world.encode(traj.frames[item.context_index])
        real_frames = traj.frames[item.target_index]
        targets = world.encode(real_frames)
        generator = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, seq]).generate_state(1)[0]))
        preds = predictor.predict(context, torch.as_tensor(item.actions), torch.as_tensor(item.timeskips),
                                  targets, samples, generator).to(targets.dtype)
        decoded = world.decode(preds)
        for j in range(preds.shape[1]):
            group = horizon_groups[j] if horizon_groups is not None else item.group
            pred_feat = world.codec.latent_features(preds[:, j].float(), fd_grid).double().numpy()
            real_feat = world.codec.latent_features(targets[j:j + 1].float(), fd_grid).double().numpy()
            bucket = features.setdefault(group, ([], []))
            bucket[0].append(pred_feat)
            bucket[1].append(real_feat)
            for s in range(samples):
                rows.append({"predictor": predictor.name, "group": group, "sequence": seq, "sample": s,
                             "psnr": psnr(decoded[s, j], real_frames[j]),
                             "latent_mse": latent_mse(preds[s, j], targets[j])})
    frame = pd.DataFrame(rows, columns=ROW_COLUMNS)
    report.rows = frame if report.rows.empty else pd.concat([report.rows, frame], ignore_index=True)
    return features


def _held_out(reader: DatasetReader, indices: Optional[Sequence[int]], cfg: RunConfig) -> List[int]:
    if indices is not None:
        return [int(i) for i in indices]
    _, held = split_indices(reader.traj_ids(), cfg.eval.train_fraction)
    return held


def _load(reader: DatasetReader, indices: Sequence[int]) -> Dict[int, Trajectory]:
    out = {}
    for i in indices:
        traj = reader[int(i)]
        out[traj.traj_id] = traj
    return out


# ---------------- Protocols ----------------

def single_step_items(world: WorldModel, trajectories: Sequence[Trajectory], horizon_seconds: float, seed: int,
                      max_sequences: int) -> Tuple[List[EvalItem], int]:
    rng = np.random.default_rng([seed, 0x51])
    k = world.context_frames
    items: List[EvalItem] = []
    skipped = 0
    events = KinematicsEvents()
    for traj in trajectories:
        gap = int(round(horizon_seconds * traj.fps))
        if gap < 1 or len(traj) < k + gap:
            skipped += 1
            continue
        last = int(rng.integers(k - 1, len(traj) - gap))
        items.append(make_eval_item(traj, world, last, [last + gap], f"{horizon_seconds:g}s", events))
        if len(items) >= max_sequences:
            break
    return items, skipped


def eval_single_step(world: WorldModel, predictor: Predictor, reader: DatasetReader,
                     indices: Optional[Sequence[int]] = None, horizon_seconds: Optional[float] = None,
                     progress: bool = False, result: Optional[RunResult] = None) -> MetricReport:
    cfg = world.cfg
    horizon = cfg.eval.horizon_seconds if horizon_seconds is None else horizon_seconds
    lookup = _load(reader, _held_out(reader, indices, cfg))
    items, skipped = single_step_items(world, list(lookup.values()), horizon, cfg.eval.seed, cfg.eval.max_sequences)
    report = MetricReport(protocol="single_step", skipped=skipped, labels=config_labels(cfg))
    if skipped and result is not None:
        result.add_log("WARN", "Skipped sequences shorter than the horizon.", skipped=skipped, horizon=horizon)
    _score(items, lookup, world, predictor, cfg.eval.samples, cfg.eval.seed, report, progress)
    return report


def eval_horizon_curve(world: WorldModel, predictor: Predictor, reader: DatasetReader,
                       indices: Optional[Sequence[int]] = None, progress: bool = False,
                       result: Optional[RunResult] = None) -> MetricReport:
    """Autoregressive rollout scored at 0, 1, .. max_horizon_steps multiples of the step interval."""
    cfg = world.cfg
    e = cfg.eval
    k = world.context_frames
    lookup = _load(reader, _held_out(reader, indices, cfg))
    rng = np.random.default_rng([e.seed, 0x4C])
    events = KinematicsEvents()
    items: List[EvalItem] = []
    skipped = 0
    for traj in lookup.values():
        gap = max(1, int(round(e.horizon_step_seconds * traj.fps)))
        steps = e.max_horizon_steps
        if len(traj) < k + steps * gap:
            skipped += 1
            continue
        last = int(rng.integers(k - 1, len(traj) - steps * gap))
        targets = [last + gap * (i + 1) for i in range(steps)]
        items.append(make_eval_item(traj, world, last, targets, "curve", events))
        if len(items) >= e.max_sequences:
            break
    groups = [f"{e.horizon_step_seconds * (i + 1):g}s" for i in range(e.max_horizon_steps)]
    report = MetricReport(protocol="horizon_curve", skipped=skipped, labels=config_labels(cfg))
    if skipped and result is not None:
        result.add_log("WARN", "Skipped sequences shorter than the longest horizon.", skipped=skipped)
    features = _score(items, lookup, world, predictor, e.samples, e.seed, report, progress, horizon_groups=groups)

    # Horizon 0: the context copy, scored against the last context frame.
    zero = []
    for seq, item in enumerate(items):
        frame = lookup[item.traj_id].frames[item.context_index[-1]]
        latent = world.encode(frame)
        recon = world.decode(latent)
        for s in range(e.samples):
            zero.append({"predictor": predictor.name, "group": "0s", "sequence": seq, "sample": s,
                         "psnr": psnr(recon, frame), "latent_mse": 0.0})
    if zero:
        report.rows = pd.concat([pd.DataFrame(zero, columns=ROW_COLUMNS), report.rows], ignore_index=True)

    fd_rows = []
    for group, (pred, real) in features.items():
        pred_x, real_x = np.concatenate(pred), np.concatenate(real)
        frames = min(len(pred_x), len(real_x))
        if frames < e.fd_min_frames:
            if result is not None:
                result.add_log("WARN", "Frechet population below minimum; not reported.", group=group,
                               frames=frames, minimum=e.fd_min_frames)
            fd_rows.append({"predictor": predictor.name, "group": group, "fd": float("nan"), "frames": frames})
            continue
        fd = frechet_distance(GaussianStats.from_features(pred_x), GaussianStats.from_features(real_x))
        fd_rows.append({"predictor": predictor.name, "group": group, "fd": fd, "frames": frames})
        if result is not None:
            result.add_log("INFO", "Frechet distance.", group=group, frames=frames, fd=round(fd, 6))
    report.fd = pd.DataFrame(fd_rows, columns=FD_COLUMNS)
    return report


def atomic_items(world: WorldModel, trajectories: Sequence[Trajectory], result: Optional[RunResult] = None
                 ) -> Tuple[List[EvalItem], List[str]]:
    """Balanced atomic segments -> single-step items predicting the segment end from its start."""
    cfg = world.cfg
    a = cfg.atomic
    thresholds = AtomicThresholds(hand=a.hand_threshold, forward=a.forward_threshold, rotate=a.rotate_threshold)
    found: List[Tuple[int, AtomicSegment]] = []
    lookup = {t.traj_id: t for t in trajectories}
    for traj in trajectories:
        window = max(2, int(round(a.window_seconds * traj.fps)))
        if len(traj) < window:
            continue
        found.extend((traj.traj_id, seg) for seg in extract_atomic_segments(traj.poses, thresholds, window))
    balanced = balance_segments(found, a.cap_per_label, a.seed)
    events = KinematicsEvents()
    items = [make_eval_item(lookup[tid], world, seg.start_index, [seg.end_index], seg.label, events)
             for tid, seg in balanced]
    present = {it.group for it in items}
    absent = [label for label in ATOMIC_LABELS if label not in present]
    if absent and result is not None:
        result.add_log("INFO", "Atomic labels without segments.", absent=",".join(absent))
    return items, absent


def eval_atomic(world: WorldModel, predictor: Predictor, reader: DatasetReader,
                indices: Optional[Sequence[int]] = None, progress: bool = False,
                result: Optional[RunResult] = None) -> MetricReport:
    cfg = world.cfg
    lookup = _load(reader, _held_out(reader, indices, cfg))
    items, absent = atomic_items(world, list(lookup.values()), result)
    report = MetricReport(protocol="atomic", absent=absent, labels=config_labels(cfg))
    _score(items, lookup, world, predictor, cfg.eval.samples, cfg.eval.seed, report, progress)
    return report


def baseline_predictors(world: WorldModel, reader: DatasetReader, indices: Optional[Sequence[int]] = None
                        ) -> List[Predictor]:
    """Model, shuffled-action, static-frame and oracle predictors sharing one action pool."""
    cfg = world.cfg
    lookup = _load(reader, _held_out(reader, indices, cfg))
    items, _ = single_step_items(world, list(lookup.values()), cfg.eval.horizon_seconds, cfg.eval.seed,
                                 cfg.eval.max_sequences)
    pool = action_pool(items)
    predictors: List[Predictor] = [ModelPredictor(world)]
    if len(pool):
        predictors.append(ShuffledActionPredictor(world, pool, cfg.eval.seed))
    predictors.extend([StaticFramePredictor(), OraclePredictor()])
    return predictors
