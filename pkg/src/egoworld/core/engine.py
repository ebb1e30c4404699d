"""EgoWorld core: training loop and autoregressive rollout.

Training draws windows of `sequence_frames` frames from `window_seconds` of a trajectory,
recomputes actions over the actual gaps and optimizes the summed per-frame diffusion loss
in one teacher-forced pass (every noisy frame sees its clean predecessors).

Rollout keeps a buffer of the k most recent latents, denoises one new frame at a time with
last-frame masks, appends the prediction and drops the oldest entry.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .cdit import CDiT, build_masks, build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import FrameCodec
from .config import RunConfig, dump_config
from .diffusion import NoiseSchedule, make_schedule, q_sample, sample_loop, total_transition_loss
from .errors import DataError, NumericalError, TrainingAborted
from .formats import DatasetReader, atomic_write_text, split_indices
from .kinematics import (ACTION_DIM, UPPER_BODY, KinematicsEvents, KinematicTree, NormalizationBounds,
                         compute_action, fit_normalization_bounds, raw_action)
from .models import LatentSequence, RunResult, Trajectory

LOGGER = "egoworld.engine"
MAX_BAD_STEPS = 3
BOUNDS_WINDOWS = 256
EVAL_BATCHES = 4


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(step_seed(seed, step))


# ---------------- Windows ----------------

def window_frames(window_span: float, fps: float) -> int:
    return max(1, int(round(window_span * fps)))


def sample_window_indices(num_frames: int, n_frames: int, span_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Window start plus n_frames - 1 sorted distinct frames from the rest of the window."""
    if n_frames < 1:
        raise DataError("A training window needs at least one frame.")
    if span_frames < n_frames:
        raise DataError(f"Window of {span_frames} frames cannot hold {n_frames} distinct frames.")
    if num_frames < span_frames:
        raise DataError(f"Trajectory has {num_frames} frames, window needs {span_frames}.")
    start = int(rng.integers(0, num_frames - span_frames + 1))
    rest = rng.choice(np.arange(start + 1, start + span_frames), size=n_frames - 1, replace=False)
    return np.concatenate([[start], np.sort(rest)]).astype(np.int64)


def sample_training_window(trajectory: Trajectory, n_frames: int, window_span: float, rng: np.random.Generator,
                           codec: FrameCodec, bounds: NormalizationBounds, tree: KinematicTree = UPPER_BODY,
                           events: Optional[KinematicsEvents] = None) -> LatentSequence:
    idx = sample_window_indices(len(trajectory), n_frames, window_frames(window_span, trajectory.fps), rng)
    poses = [trajectory.poses[i] for i in idx]
    actions = [compute_action(p0, p1, bounds, tree, events) for p0, p1 in zip(poses[:-1], poses[1:])]
    with torch.no_grad():
        latents = codec.encode_frame(trajectory.frames[idx])
    dtype = latents.dtype
    values = np.stack([a.values for a in actions]) if actions else np.zeros((0, ACTION_DIM))
    return LatentSequence(
        latents=latents,
        actions=torch.as_tensor(values, dtype=dtype),
        timeskips=torch.tensor([a.timeskip for a in actions], dtype=dtype),
        traj_id=trajectory.traj_id,
        frame_indices=tuple(int(i) for i in idx),
    )


@dataclass
class WindowBatch:
    latents: torch.Tensor  # (B, T, N, C) clean
    actions: torch.Tensor  # (B, T, 48); row 0 is the zero action of the first frame
    timeskips: torch.Tensor  # (B, T) seconds; row 0 is 0
    traj_ids: List[int] = field(default_factory=list)

    def to(self, dtype: torch.dtype) -> "WindowBatch":
        return WindowBatch(self.latents.to(dtype), self.actions.to(dtype), self.timeskips.to(dtype), self.traj_ids)


def collate_windows(sequences: Sequence[LatentSequence]) -> WindowBatch:
    if not sequences:
        raise DataError("Cannot batch zero windows.")
    latents = torch.stack([s.latents for s in sequences])
    b, t = latents.shape[:2]
    actions = latents.new_zeros(b, t, ACTION_DIM)
    timeskips = latents.new_zeros(b, t)
    for i, s in enumerate(sequences):
        actions[i, 1:] = s.actions
        timeskips[i, 1:] = s.timeskips
    return WindowBatch(latents, actions, timeskips, [s.traj_id for s in sequences])


class WindowBatches(Dataset):
    """Map-style dataset: item `step` is the batch of that optimizer step, seeded by (seed, step)."""

    def __init__(self, reader: DatasetReader, indices: Sequence[int], codec: FrameCodec, bounds: NormalizationBounds,
                 n_frames: int, window_span: float, batch_size: int, seed: int, length: int):
        span = window_frames(window_span, reader.info.fps)
        self.indices = [int(i) for i in indices if reader.num_frames(int(i)) >= span]
        if not self.indices:
            raise DataError(f"No trajectory holds a {window_span:.2f} s window ({span} frames).")
        self.reader = reader
        self.codec = codec
        self.bounds = bounds
        self.n_frames = n_frames
        self.window_span = window_span
        self.batch_size = batch_size
        self.seed = seed
        self.length = length

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, step: int) -> WindowBatch:
        rng = np.random.default_rng([self.seed, int(step)])
        picks = rng.integers(0, len(self.indices), size=self.batch_size)
        windows = [
            sample_training_window(self.reader[self.indices[int(p)]], self.n_frames, self.window_span, rng,
                                   self.codec, self.bounds)
            for p in picks
        ]
        return collate_windows(windows)


def window_raw_actions(reader: DatasetReader, indices: Sequence[int], n_frames: int, window_span: float,
                       windows: int, seed: int, events: Optional[KinematicsEvents] = None) -> np.ndarray:
    """Raw (unnormalized) actions over the gaps of randomly sampled training windows."""
    span = window_frames(window_span, reader.info.fps)
    eligible = [int(i) for i in indices if reader.num_frames(int(i)) >= span]
    if not eligible:
        raise DataError("No trajectory is long enough to fit action bounds.")
    rng = np.random.default_rng([seed, 0xB0])
    rows: List[np.ndarray] = []
    for _ in range(windows):
        traj = reader[eligible[int(rng.integers(0, len(eligible)))]]
        idx = sample_window_indices(len(traj), n_frames, span, rng)
        rows.extend(raw_action(traj.poses[a], traj.poses[b], UPPER_BODY, events) for a, b in zip(idx[:-1], idx[1:]))
    return np.stack(rows)


# ---------------- World model bundle ----------------

@dataclass
class WorldModel:
    cfg: RunConfig
    codec: FrameCodec
    model: CDiT
    schedule: NoiseSchedule
    bounds: NormalizationBounds
    step: int = 0
    ema: Optional[CDiT] = None

    @property
    def context_frames(self) -> int:
        return self.cfg.model.context_frames

    @property
    def dtype(self) -> torch.dtype:
        return self.model.frame_pos.dtype

    def sampling_schedule(self) -> NoiseSchedule:
        n = self.cfg.diffusion.sampling_steps
        return self.schedule if n <= 0 or n >= self.schedule.n_steps else self.schedule.respace(n)

    def encode(self, frames: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            return self.codec.encode_frame(frames).to(self.dtype)

    def decode(self, latents: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.codec.decode_frame(latents.to(torch.get_default_dtype()))

    def tensors(self) -> Dict[str, Dict[str, torch.Tensor]]:
        out = {"model": self.model.state_dict(), "codec": self.codec.state_dict()}
        if self.ema is not None:
            out["ema"] = self.ema.state_dict()
        return out

    def save(self, directory: Path, optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
        return save_checkpoint(directory, step=self.step, cfg=self.cfg, schedule=self.schedule, bounds=self.bounds,
                               tensors=self.tensors(),
                               optimizer_state=optimizer.state_dict() if optimizer is not None else None)

    @classmethod
    def load(cls, directory: Path, use_ema: bool = True) -> "WorldModel":
        data = load_checkpoint(directory)
        world = build_world_model(data.cfg, data.bounds, schedule=data.schedule)
        world.model.load_state_dict(data.tensors["model"])
        world.codec.load_state_dict(data.tensors["codec"])
        if "ema" in data.tensors:
            world.ema = copy.deepcopy(world.model)
            world.ema.load_state_dict(data.tensors["ema"])
            if use_ema:
                world.model.load_state_dict(data.tensors["ema"])
        world.step = data.step
        return world


def build_world_model(cfg: RunConfig, bounds: NormalizationBounds, codec: Optional[FrameCodec] = None,
                      schedule: Optional[NoiseSchedule] = None) -> WorldModel:
    codec = codec or FrameCodec(cfg.model.codec, cfg.data.resolution, cfg.model.patch, cfg.model.latent_channels)
    model = build_model(cfg.model, codec.latent_dim, codec.tokens_per_frame,
                        timeskip_scale=1.0 / cfg.train.window_seconds)
    if cfg.train.dtype == "float64":
        model = model.double()
    schedule = schedule or make_schedule(cfg.diffusion.steps, cfg.diffusion.schedule)
    world = WorldModel(cfg=cfg, codec=codec, model=model, schedule=schedule, bounds=bounds)
    if cfg.train.ema_decay > 0:
        world.ema = copy.deepcopy(model).requires_grad_(False)
    return world


# ---------------- Losses ----------------

@dataclass
class LossStats:
    loss: float
    loss_simple: float  # mean over transitions
    loss_vlb: float  # mean over transitions
    grad_norm: float = 0.0
    skipped: bool = False


def draw_noise(latents: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator
               ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Independent noise step per frame (B, T) and Gaussian noise shaped like the latents."""
    tau = torch.randint(0, schedule.n_steps, latents.shape[:2], generator=generator)
    eps = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    return tau, eps


def sequence_loss(model: CDiT, schedule: NoiseSchedule, batch: WindowBatch, k: int, lambda_vlb: float,
                  tau: torch.Tensor, eps: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Teacher-forced prefix loss in one pass; returns (sum over frames, batch mean) and per-frame terms."""
    latents = batch.latents
    masks = build_masks(latents.shape[1], k, latents.shape[2], "train_prefix")
    z = q_sample(latents, tau, eps, schedule)
    eps_hat, var_coeff = model(z, latents, batch.actions, batch.timeskips, tau, masks)
    total, simple, vlb = total_transition_loss(eps_hat, eps, var_coeff, z, latents, tau, schedule, lambda_vlb,
                                               start_dim=2)
    return total.sum(dim=1).mean(), simple, vlb


def sequential_transition_loss(model: CDiT, schedule: NoiseSchedule, batch: WindowBatch, k: int,
                               lambda_vlb: float, tau: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Same objective as sequence_loss, one transition per forward pass."""
    latents = batch.latents
    b, t_len, n, _ = latents.shape
    total = latents.new_zeros(b)
    for t in range(t_len):
        masks = build_masks(t + 1, k, n, "infer_last")
        sl = slice(t, t + 1)
        z = q_sample(latents[:, sl], tau[:, sl], eps[:, sl], schedule)
        eps_hat, var_coeff = model(z, latents[:, :t], batch.actions[:, sl], batch.timeskips[:, sl], tau[:, sl], masks)
        frame_total, _, _ = total_transition_loss(eps_hat, eps[:, sl], var_coeff, z, latents[:, sl], tau[:, sl],
                                                  schedule, lambda_vlb, start_dim=2)
        total = total + frame_total[:, 0]
    return total.mean()


def eval_loss(world: WorldModel, batches: Sequence[WindowBatch], seed: int) -> float:
    """Mean sequence loss over fixed batches with noise keyed by (seed, batch index)."""
    model = world.model
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for i, batch in enumerate(batches):
            batch = batch.to(world.dtype)
            tau, eps = draw_noise(batch.latents, world.schedule, step_generator(seed, i))
            loss, _, _ = sequence_loss(model, world.schedule, batch, world.context_frames,
                                       world.cfg.diffusion.lambda_vlb, tau, eps)
            losses.append(float(loss.item()))
    model.train(was_training)
    return float(np.mean(losses)) if losses else float("nan")


# ---------------- Training ----------------

class MetricsLog:
    COLUMNS = ("step", "loss_simple", "loss_vlb", "grad_norm", "lr", "wall_time")

    def __init__(self, path: Path):
        self.path = Path(path)

    def append(self, row: Dict[str, float]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame([[row[c] for c in self.COLUMNS]], columns=list(self.COLUMNS))
        frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path) if self.path.exists() else pd.DataFrame(columns=list(self.COLUMNS))


@dataclass
class TrainResult(RunResult):
    world: Optional[WorldModel] = None
    loss_history: List[float] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)


def make_optimizer(world: WorldModel) -> torch.optim.Optimizer:
    t = world.cfg.train
    return torch.optim.AdamW(world.model.parameters(), lr=t.lr, betas=tuple(t.betas), weight_decay=t.weight_decay)


class Trainer:
    """Owns the optimizer and the only mutable reference to the model weights."""

    def __init__(self, world: WorldModel, optimizer: Optional[torch.optim.Optimizer] = None,
                 result: Optional[RunResult] = None):
        self.world = world
        self.optimizer = optimizer or make_optimizer(world)
        self.result = result or RunResult(success=True, overall_message="", logger_name=LOGGER)
        self.bad_steps = 0

    def train_step(self, batch: WindowBatch, generator: torch.Generator) -> LossStats:
        world = self.world
        model = world.model
        model.train()
        batch = batch.to(world.dtype)
        tau, eps = draw_noise(batch.latents, world.schedule, generator)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            loss, simple, vlb = sequence_loss(model, world.schedule, batch, world.context_frames,
                                              world.cfg.diffusion.lambda_vlb, tau, eps)
            stats = LossStats(loss=float(loss.item()), loss_simple=float(simple.mean().item()),
                              loss_vlb=float(vlb.mean().item()))
        except NumericalError:
            # Non-finite model outputs.
            loss = None
            stats = LossStats(loss=float("nan"), loss_simple=float("nan"), loss_vlb=float("nan"))
        if loss is not None and np.isfinite(stats.loss):
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), world.cfg.train.grad_clip)
            stats.grad_norm = float(grad_norm.item())
        if not (np.isfinite(stats.loss) and np.isfinite(stats.grad_norm)):
            self.optimizer.zero_grad(set_to_none=True)
            stats.skipped = True
            self.bad_steps += 1
            self.result.add_log("WARN", "Skipped non-finite training step.", step=world.step,
                                loss=stats.loss, consecutive=self.bad_steps)
            if self.bad_steps >= MAX_BAD_STEPS:
                raise TrainingAborted(f"{MAX_BAD_STEPS} consecutive non-finite training steps (step {world.step}).")
            return stats
        self.bad_steps = 0
        self.optimizer.step()
        if world.ema is not None:
            self._update_ema()
        return stats

    def _update_ema(self) -> None:
        decay = self.world.cfg.train.ema_decay
        with torch.no_grad():
            for p_ema, p in zip(self.world.ema.parameters(), self.world.model.parameters()):
                p_ema.mul_(decay).add_(p, alpha=1.0 - decay)


def fit(cfg: RunConfig, dataset_path: Union[str, Path], out_dir: Union[str, Path],
        resume: Optional[Union[str, Path]] = None, progress: bool = False) -> TrainResult:
    """Train a world model and keep `checkpoints/last` and `checkpoints/best` under out_dir."""
    out = Path(out_dir)
    result = TrainResult(success=False, overall_message="", logger_name=LOGGER)
    torch.manual_seed(cfg.train.seed)
    reader = DatasetReader(dataset_path)
    train_idx, held_idx = split_indices(reader.traj_ids(), cfg.eval.train_fraction)
    if not train_idx:
        raise DataError("Training split is empty.")
    result.add_log("INFO", "Dataset split.", train=len(train_idx), held_out=len(held_idx))

    optimizer_state = None
    if resume is not None:
        data = load_checkpoint(Path(resume), with_optimizer=True)
        world = build_world_model(cfg, data.bounds, schedule=data.schedule)
        world.model.load_state_dict(data.tensors["model"])
        world.codec.load_state_dict(data.tensors["codec"])
        if world.ema is not None and "ema" in data.tensors:
            world.ema.load_state_dict(data.tensors["ema"])
        world.step = data.step
        optimizer_state = data.optimizer_state
        result.add_log("INFO", "Resumed from checkpoint.", path=str(resume), step=data.step)
    else:
        events = KinematicsEvents()
        raw = window_raw_actions(reader, train_idx, cfg.model.sequence_frames, cfg.train.window_seconds,
                                 BOUNDS_WINDOWS, cfg.train.seed, events)
        bounds = fit_normalization_bounds(raw)
        result.add_log("INFO", "Fitted action bounds.", actions=len(raw), renormalized=events.renormalized,
                       gimbal_lock=events.gimbal_lock)
        codec = FrameCodec(cfg.model.codec, cfg.data.resolution, cfg.model.patch, cfg.model.latent_channels)
        if codec.ae is not None:
            frames = np.concatenate([reader[i].frames for i in train_idx[:16]])
            history = codec.pretrain(frames, seed=cfg.train.seed, progress=progress)
            result.add_log("INFO", "Pretrained codec.", final_mse=history[-1], rmse=codec.reconstruction_rmse(frames[:64]))
        world = build_world_model(cfg, bounds, codec=codec)

    trainer = Trainer(world, result=result)
    if optimizer_state is not None:
        trainer.optimizer.load_state_dict(optimizer_state)
    t = cfg.train
    batches = WindowBatches(reader, train_idx, world.codec, world.bounds, cfg.model.sequence_frames,
                            t.window_seconds, t.batch_size, t.seed, length=t.steps)
    held = WindowBatches(reader, held_idx or train_idx, world.codec, world.bounds, cfg.model.sequence_frames,
                         t.window_seconds, t.batch_size, cfg.eval.seed, length=EVAL_BATCHES)
    eval_batches: List[WindowBatch] = []
    metrics = MetricsLog(out / "metrics.csv")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.resolved.yaml", dump_config(cfg))

    best = float("inf")
    recent: List[float] = []
    start = time.time()
    loader = DataLoader(batches, batch_size=None, sampler=range(world.step, t.steps), num_workers=t.workers)
    for batch in tqdm(loader, total=max(0, t.steps - world.step), desc="train", disable=not progress):
        stats = trainer.train_step(batch, step_generator(t.seed, world.step))
        world.step += 1
        result.loss_history.append(stats.loss_simple)
        if not stats.skipped:
            recent.append(stats.loss)
        if t.log_every and world.step % t.log_every == 0:
            metrics.append({"step": world.step, "loss_simple": stats.loss_simple, "loss_vlb": stats.loss_vlb,
                            "grad_norm": stats.grad_norm, "lr": trainer.optimizer.param_groups[0]["lr"],
                            "wall_time": time.time() - start})
        score = None
        if t.eval_every and world.step % t.eval_every == 0:
            eval_batches = eval_batches or [held[i] for i in range(EVAL_BATCHES)]
            score = eval_loss(world, eval_batches, cfg.eval.seed)
            result.add_log("INFO", "Eval hook.", step=world.step, eval_loss=score)
        elif not t.eval_every and t.checkpoint_every and world.step % t.checkpoint_every == 0 and recent:
            score = float(np.mean(recent))
            recent.clear()
        if t.checkpoint_every and world.step % t.checkpoint_every == 0:
            result.checkpoints["last"] = str(world.save(out / "checkpoints" / "last", trainer.optimizer))
            result.add_log("INFO", "Checkpoint written.", step=world.step, path=result.checkpoints["last"])
        if score is not None and score < best:
            best = score
            result.checkpoints["best"] = str(world.save(out / "checkpoints" / "best", trainer.optimizer))

    result.checkpoints["last"] = str(world.save(out / "checkpoints" / "last", trainer.optimizer))
    if "best" not in result.checkpoints:
        result.checkpoints["best"] = str(world.save(out / "checkpoints" / "best", trainer.optimizer))
    result.world = world
    result.success = True
    result.overall_message = f"Trained to step {world.step}."
    result.summary = {"step": world.step, "final_loss": result.loss_history[-1] if result.loss_history else None,
                      "metrics": str(metrics.path), **result.checkpoints}
    result.add_log("INFO", result.overall_message, **result.checkpoints)
    return result


# ---------------- Rollout ----------------

class CondContext:
    """The k most recent latents (B, k, N, C); shorter contexts are padded with the oldest frame."""

    def __init__(self, latents: torch.Tensor, k: int):
        if latents.ndim != 4 or latents.shape[1] < 1:
            raise DataError("Rollout needs at least one context frame (B, F, N, C).")
        if latents.shape[1] < k:
            pad = latents[:, :1].expand(-1, k - latents.shape[1], -1, -1)
            latents = torch.cat([pad, latents], dim=1)
        self.k = k
        self.latents = latents[:, -k:].clone()

    def append(self, latent: torch.Tensor) -> None:
        self.latents = torch.cat([self.latents[:, 1:], latent[:, None]], dim=1)


def rollout(world: WorldModel, context: torch.Tensor, actions: torch.Tensor, timeskips: torch.Tensor,
            generator: Optional[torch.Generator] = None, schedule: Optional[NoiseSchedule] = None,
            progress: bool = False) -> torch.Tensor:
    """Predict one latent frame per action.

    context (B, F, N, C) clean latents, actions (B, A, 48) normalized, timeskips (B, A) seconds;
    returns (B, A, N, C). Unbatched inputs (no leading B) are accepted and returned unbatched.
    """
    unbatched = context.ndim == 3
    if unbatched:
        context, actions, timeskips = context[None], actions[None], timeskips[None]
    b, _, n, c = context.shape
    n_actions = actions.shape[1]
    if n_actions == 0:
        out = context.new_zeros(b, 0, n, c)
        return out[0] if unbatched else out
    if actions.shape != (b, n_actions, ACTION_DIM) or timeskips.shape != (b, n_actions):
        raise DataError("Rollout actions must be (B, A, 48) with matching timeskips (B, A).")
    k = world.context_frames
    schedule = schedule or world.sampling_schedule()
    masks = build_masks(k + 1, k, n, "infer_last")
    model = world.model
    model.eval()
    dtype = world.dtype
    buffer = CondContext(context.to(dtype), k)
    actions = actions.to(dtype)
    timeskips = timeskips.to(dtype)
    preds = []
    for step in tqdm(range(n_actions), desc="rollout", disable=not progress, leave=False):
        a = actions[:, step:step + 1]
        dt = timeskips[:, step:step + 1]
        ctx = buffer.latents

        def model_fn(z: torch.Tensor, tau: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
            eps_hat, var_coeff = model(z[:, None], ctx, a, dt, tau[:, None], masks)
            return eps_hat[:, 0], var_coeff[:, 0]

        pred = sample_loop(model_fn, (b, n, c), schedule, generator=generator, dtype=dtype)
        preds.append(pred)
        buffer.append(pred)
    out = torch.stack(preds, dim=1)
    return out[0] if unbatched else out


def rollout_frames(world: WorldModel, context_frames: np.ndarray, actions: torch.Tensor, timeskips: torch.Tensor,
                   seed: int = 0, progress: bool = False) -> np.ndarray:
    """Pixel-space rollout: encode the context, roll out, decode every prediction at the end."""
    latents = rollout(world, world.encode(context_frames), actions, timeskips,
                      generator=torch.Generator().manual_seed(int(seed)), progress=progress)
    return world.decode(latents)
