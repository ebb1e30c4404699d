"""EgoWorld core: checkpoint directories.

A checkpoint is a directory holding `tensors.pt` (named tensors per component), an optional
`optimizer.pt`, and `manifest.txt` (key=value lines). The manifest is written last and
records the blob checksum, so a directory without a matching manifest is incomplete.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
import yaml
from omegaconf import OmegaConf

from .config import RunConfig, config_hash, load_config
from .diffusion import NoiseSchedule
from .errors import ConfigError, FormatError
from .formats import atomic_write_bytes, atomic_write_text
from .kinematics import NormalizationBounds

CHECKPOINT_FORMAT = "egoworld-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.txt"
TENSORS = "tensors.pt"
OPTIMIZER = "optimizer.pt"


@dataclass
class CheckpointData:
    step: int
    cfg: RunConfig
    schedule: NoiseSchedule
    bounds: NormalizationBounds
    tensors: Dict[str, Dict[str, torch.Tensor]]
    optimizer_state: Optional[Dict[str, Any]] = None
    manifest: Dict[str, str] = field(default_factory=dict)


def _flatten(prefix: str, node: Any, out: Dict[str, str]) -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = yaml.safe_dump(node, default_flow_style=True).strip().removesuffix("...").strip()


def _floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def _to_bytes(obj: Any) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def save_checkpoint(directory: Path, *, step: int, cfg: RunConfig, schedule: NoiseSchedule,
                    bounds: NormalizationBounds, tensors: Dict[str, Dict[str, torch.Tensor]],
                    optimizer_state: Optional[Dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = _to_bytes({name: {k: v.detach().cpu() for k, v in sd.items()} for name, sd in tensors.items()})
    atomic_write_bytes(directory / TENSORS, blob)
    entries: Dict[str, str] = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "step": str(int(step)),
        "tensors.sha256": hashlib.sha256(blob).hexdigest(),
        "config.sha256": config_hash(cfg),
        "bounds.low": _floats(bounds.low),
        "bounds.high": _floats(bounds.high),
        "bounds.scale_rotations": str(bool(bounds.scale_rotations)).lower(),
    }
    if optimizer_state is not None:
        opt_blob = _to_bytes(optimizer_state)
        atomic_write_bytes(directory / OPTIMIZER, opt_blob)
        entries["optimizer.sha256"] = hashlib.sha256(opt_blob).hexdigest()
    entries.update(schedule.to_manifest())
    flat: Dict[str, str] = {}
    _flatten("config", OmegaConf.to_container(OmegaConf.structured(cfg)), flat)
    entries.update(flat)
    atomic_write_text(directory / MANIFEST, "".join(f"{k}={v}\n" for k, v in entries.items()))
    return directory


def read_manifest(directory: Path) -> Dict[str, str]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FormatError(f"Checkpoint manifest missing: {path}")
    entries: Dict[str, str] = {}
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"Malformed manifest line {no}: {line!r}")
        entries[key.strip()] = value.strip()
    if entries.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"Not an EgoWorld checkpoint: {directory}")
    if entries.get("version") != str(CHECKPOINT_VERSION):
        raise FormatError(f"Unsupported checkpoint version {entries.get('version')}.")
    return entries


def _verified(path: Path, expected: str) -> bytes:
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    if hashlib.sha256(blob).hexdigest() != expected:
        raise FormatError(f"Checksum mismatch for {path} (incomplete or corrupted checkpoint).")
    return blob


def load_checkpoint(directory: Path, with_optimizer: bool = False) -> CheckpointData:
    directory = Path(directory)
    entries = read_manifest(directory)
    overrides = {k[len("config."):]: yaml.safe_load(v) for k, v in entries.items()
                 if k.startswith("config.") and k != "config.sha256"}
    try:
        cfg = load_config(None, overrides)
    except ConfigError as e:
        raise FormatError(f"Checkpoint config is invalid: {e}") from e
    blob = _verified(directory / TENSORS, entries.get("tensors.sha256", ""))
    tensors = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    optimizer_state = None
    if with_optimizer and "optimizer.sha256" in entries:
        opt_blob = _verified(directory / OPTIMIZER, entries["optimizer.sha256"])
        optimizer_state = torch.load(io.BytesIO(opt_blob), map_location="cpu", weights_only=False)
    try:
        bounds = NormalizationBounds(
            low=np.array([float(v) for v in entries["bounds.low"].split(",")]),
            high=np.array([float(v) for v in entries["bounds.high"].split(",")]),
            scale_rotations=entries.get("bounds.scale_rotations", "true") == "true",
        )
        step = int(entries["step"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"Checkpoint manifest is incomplete: {e}") from e
    return CheckpointData(step=step, cfg=cfg, schedule=NoiseSchedule.from_manifest(entries), bounds=bounds,
                          tensors=tensors, optimizer_state=optimizer_state, manifest=entries)
