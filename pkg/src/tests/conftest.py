from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from egoworld.core.config import RunConfig, load_config  # noqa: E402
from egoworld.core.engine import WorldModel, build_world_model  # noqa: E402
from egoworld.core.formats import write_dataset  # noqa: E402
from egoworld.core.kinematics import NormalizationBounds  # noqa: E402
from egoworld.core.synthworld import generate_dataset  # noqa: E402

# 8x8 frames, 2-layer width-32 model, 20 noise steps. Six trajectories of 24 frames:
# positions 2 and 5 land in the held-out split.
TINY = {
    "data.trajectories": 6,
    "data.frames": 24,
    "data.fps": 4.0,
    "data.resolution": 8,
    "data.obstacles_min": 2,
    "data.obstacles_max": 4,
    "model.width": 32,
    "model.layers": 2,
    "model.heads": 4,
    "model.context_frames": 3,
    "model.sequence_frames": 4,
    "model.action_embed_dim": 16,
    "diffusion.steps": 20,
    "diffusion.sampling_steps": 5,
    "train.steps": 2,
    "train.batch_size": 2,
    "train.window_seconds": 2.0,
    "train.log_every": 1,
    "train.checkpoint_every": 1,
    "eval.samples": 2,
    "eval.max_sequences": 4,
    "eval.max_horizon_steps": 2,
    "eval.horizon_seconds": 1.0,
    "atomic.window_seconds": 2.0,
    "plan.horizon": 2,
    "plan.population": 8,
    "plan.iterations": 2,
}
HELD_OUT = [2, 5]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale learning tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale learning runs (minutes on CPU), enabled by --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(**extra) -> RunConfig:
    return load_config(None, {**TINY, **extra})


def write_tiny_yaml(path: Path, **extra) -> Path:
    sections = {}
    for key, value in {**TINY, **extra}.items():
        section, field = key.split(".", 1)
        sections.setdefault(section, {})[field] = value
    lines = []
    for section, fields in sections.items():
        lines.append(f"{section}:")
        lines.extend(f"  {k}: {v}" for k, v in fields.items())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    cfg = tiny_config()
    trajectories, _ = generate_dataset(cfg.data)
    path = tmp_path_factory.mktemp("data") / "dataset.bin"
    write_dataset(trajectories, path, seed=cfg.data.seed)
    return path


@pytest.fixture
def tiny_world(tiny_cfg) -> WorldModel:
    torch.manual_seed(0)
    return build_world_model(tiny_cfg, NormalizationBounds.fixed())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def randomize(module: torch.nn.Module, std: float = 0.05, seed: int = 0) -> torch.nn.Module:
    """Replace the zero-initialized output heads so outputs depend on every input."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module
