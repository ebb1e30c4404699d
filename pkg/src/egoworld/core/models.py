"""EgoWorld core: shared data models."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch


@dataclass(frozen=True)
class PoseFrame:
    timestamp: float
    root_translation: np.ndarray  # (3,) meters, world frame
    joint_rotations: np.ndarray  # (J, 4) unit quaternions (w, x, y, z), world frame

    @property
    def num_joints(self) -> int:
        return int(self.joint_rotations.shape[0])

    def as_float32(self) -> "PoseFrame":
        """Round-trip through the on-disk precision (f32 translation and rotations)."""
        return PoseFrame(
            timestamp=float(self.timestamp),
            root_translation=self.root_translation.astype(np.float32).astype(np.float64),
            joint_rotations=self.joint_rotations.astype(np.float32).astype(np.float64),
        )


@dataclass(frozen=True)
class ActionVector:
    values: np.ndarray  # (48,) [0:3) translation delta, [3:48) 15 x (phi, theta, psi)
    timeskip: float  # seconds, conditioned separately


@dataclass(frozen=True)
class AtomicSegment:
    label: str
    start_index: int
    end_index: int
    magnitude: float  # meters or radians


@dataclass(frozen=True)
class Obstacle:
    kind: str  # "box" | "panel"
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    color: Tuple[int, int, int]


@dataclass(frozen=True)
class Scene:
    seed: int
    obstacles: Tuple[Obstacle, ...]
    floor_colors: Tuple[Tuple[int, int, int], Tuple[int, int, int]]
    sky_color: Tuple[int, int, int]
    bounds: float  # half extent of the square arena, meters

    def layout_key(self) -> Tuple[Any, ...]:
        return tuple((o.kind, o.center, o.size, o.color) for o in self.obstacles)


@dataclass(frozen=True)
class BodyState:
    pose: PoseFrame
    joint_positions: np.ndarray  # (J, 3) meters, world frame
    camera_position: np.ndarray  # (3,)
    camera_rotation: np.ndarray  # (3, 3) camera-to-world, columns = forward, left, up
    collided: bool = False


@dataclass
class Trajectory:
    traj_id: int
    fps: float
    frames: np.ndarray  # (N, H, W, 3) uint8
    poses: List[PoseFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def duration(self) -> float:
        if len(self.poses) < 2:
            return 0.0
        return self.poses[-1].timestamp - self.poses[0].timestamp


@dataclass
class LatentSequence:
    latents: torch.Tensor  # (F, N, C)
    actions: torch.Tensor  # (F - 1, 48) normalized
    timeskips: torch.Tensor  # (F - 1,) seconds
    traj_id: int
    frame_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.actions.shape[0] != self.latents.shape[0] - 1:
            raise ValueError("LatentSequence needs exactly one action per transition.")
        if self.timeskips.numel() and bool((self.timeskips <= 0).any()):
            raise ValueError("LatentSequence timeskips must be positive.")


@dataclass
class RunResult:
    """Outcome of one engine invocation plus its structured log."""

    success: bool
    overall_message: str
    summary: Dict[str, Any] = field(default_factory=dict)
    logs: List[Dict[str, Any]] = field(default_factory=list)
    logger_name: str = "egoworld"

    def add_log(self, level: str, message: str, **fields: Any) -> None:
        entry = {"ts": time.time(), "level": level, "message": message}
        entry.update(fields)
        self.logs.append(entry)
        emit_log(self.logger_name, level, message, **fields)


_LEVELS = {"INFO": logging.INFO, "WARN": logging.WARNING, "ERROR": logging.ERROR, "DEBUG": logging.DEBUG}


def emit_log(logger_name: str, level: str, message: str, **fields: Any) -> None:
    detail = " ".join(f"{k}={v}" for k, v in fields.items())
    logging.getLogger(logger_name).log(_LEVELS.get(level, logging.INFO), f"{message} {detail}".rstrip())

