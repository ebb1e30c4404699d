"""EgoWorld core: run configuration (sectioned YAML, structured by dataclasses)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .errors import ConfigError

MODEL_SIZES = {"S": (6, 256, 4), "B": (12, 384, 6), "L": (16, 512, 8)}


@dataclass
class DataConfig:
    seed: int = 0
    trajectories: int = 200
    frames: int = 96  # per trajectory (24 s at 4 FPS)
    fps: float = 4.0
    resolution: int = 64  # square frames, up to 128
    obstacles_min: int = 8
    obstacles_max: int = 32
    workers: int = 1


@dataclass
class ModelConfig:
    size: str = "S"  # S | B | L
    layers: int = 0  # 0 -> from size
    width: int = 0  # 0 -> from size
    heads: int = 0  # 0 -> from size
    context_frames: int = 3  # k, 3..15
    sequence_frames: int = 16  # T
    action_conditioning: str = "concat"  # concat | embed
    action_embed_dim: int = 512
    mlp_ratio: float = 4.0
    codec: str = "patch_linear"  # patch_linear | tiny_ae
    latent_channels: int = 8  # tiny_ae only
    patch: int = 2

    def resolved(self) -> "ModelConfig":
        layers, width, heads = MODEL_SIZES[self.size]
        return ModelConfig(**{**self.__dict__, "layers": self.layers or layers,
                              "width": self.width or width, "heads": self.heads or heads})


@dataclass
class DiffusionConfig:
    steps: int = 1000
    schedule: str = "linear"  # linear | cosine
    sampling_steps: int = 50  # strided subset; 0 -> full schedule
    lambda_vlb: float = 0.001


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 32
    lr: float = 8e-5
    betas: List[float] = field(default_factory=lambda: [0.9, 0.95])
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    window_seconds: float = 8.0
    ema_decay: float = 0.0  # 0 disables weight EMA
    dtype: str = "float32"  # float32 | float64
    workers: int = 0  # prefetch workers; 0 keeps loading in the trainer process
    log_every: int = 10
    checkpoint_every: int = 500
    eval_every: int = 0  # 0 disables the periodic eval hook


@dataclass
class EvalConfig:
    seed: int = 0
    horizon_seconds: float = 2.0
    samples: int = 5
    max_sequences: int = 64
    horizon_step_seconds: float = 1.0
    max_horizon_steps: int = 16
    fd_min_frames: int = 64
    fd_grid: int = 4
    train_fraction: float = 0.8


@dataclass
class AtomicConfig:
    window_seconds: float = 2.0
    hand_threshold: float = 0.15  # meters
    forward_threshold: float = 0.5  # meters
    rotate_threshold: float = 0.35  # radians
    cap_per_label: int = 100
    seed: int = 0


@dataclass
class PlanConfig:
    arm: str = "right"  # left | right
    horizon: int = 8
    step_seconds: float = 0.25
    population: int = 32
    elite_fraction: float = 0.125
    iterations: int = 10
    variance_floor: float = 1e-6
    min_variance: float = 1e-8
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    atomic: AtomicConfig = field(default_factory=AtomicConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)


def _line_of(text: str, dotted: str) -> Optional[int]:
    leaf = dotted.split(".")[-1]
    for no, line in enumerate(text.splitlines(), start=1):
        if line.strip().startswith(f"{leaf}:"):
            return no
    return None


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, an optional YAML file and dotted overrides; unknown keys are rejected."""
    base = OmegaConf.structured(RunConfig)
    text = ""
    try:
        if path:
            text = Path(path).read_text(encoding="utf-8")
            try:
                loaded = yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                mark = getattr(e, "problem_mark", None)
                raise ConfigError(f"Config is not valid YAML: {e}", line=(mark.line + 1) if mark else None) from e
            if not isinstance(loaded, dict):
                raise ConfigError("Config file must contain sections (data, model, train, ...).")
            base = OmegaConf.merge(base, OmegaConf.create(loaded))
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            OmegaConf.update(base, key, value, merge=True, force_add=False)
        cfg: RunConfig = OmegaConf.to_object(base)
    except OmegaConfBaseException as e:
        key = str(getattr(e, "full_key", "") or "")
        raise ConfigError(f"Invalid configuration: {e.msg if hasattr(e, 'msg') else e}",
                          field=key, line=_line_of(text, key) if key and text else None) from e
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    checks: Sequence = (
        (cfg.model.size in MODEL_SIZES, "model.size", "must be one of S, B, L"),
        (3 <= cfg.model.context_frames <= 15, "model.context_frames", "must lie in [3, 15]"),
        (cfg.model.context_frames < cfg.model.sequence_frames, "model.context_frames", "must be < model.sequence_frames"),
        (cfg.model.action_conditioning in ("concat", "embed"), "model.action_conditioning", "must be concat or embed"),
        (cfg.model.codec in ("patch_linear", "tiny_ae"), "model.codec", "must be patch_linear or tiny_ae"),
        (cfg.diffusion.schedule in ("linear", "cosine"), "diffusion.schedule", "must be linear or cosine"),
        (cfg.diffusion.steps >= 2, "diffusion.steps", "must be >= 2"),
        (cfg.diffusion.lambda_vlb >= 0, "diffusion.lambda_vlb", "must be >= 0"),
        (cfg.data.resolution % 2 == 0 and 8 <= cfg.data.resolution <= 128, "data.resolution", "must be even, 8..128"),
        (cfg.data.fps > 0, "data.fps", "must be positive"),
        (cfg.train.lr > 0 and cfg.train.grad_clip > 0 and cfg.train.batch_size > 0, "train", "lr, grad_clip, batch_size must be positive"),
        (cfg.train.window_seconds > 0, "train.window_seconds", "must be positive"),
        (cfg.train.dtype in ("float32", "float64"), "train.dtype", "must be float32 or float64"),
        (0.0 < cfg.plan.elite_fraction < 1.0, "plan.elite_fraction", "must lie in (0, 1)"),
        (cfg.plan.arm in ("left", "right"), "plan.arm", "must be left or right"),
        (cfg.eval.samples >= 1, "eval.samples", "must be >= 1"),
    )
    for ok, name, why in checks:
        if not ok:
            raise ConfigError(f"Invalid value: {why}", field=name)
    resolved = cfg.model.resolved()
    if resolved.width % resolved.heads:
        raise ConfigError("Model width must be divisible by heads", field="model.heads")


def dump_config(cfg: RunConfig) -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
