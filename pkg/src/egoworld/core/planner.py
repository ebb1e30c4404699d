"""EgoWorld core: goal-conditioned arm planning with the cross-entropy method.

A candidate is one 12-D arm delta (shoulder, upper arm, forearm, hand Euler triples) repeated
over the horizon. Candidates are rolled out by the world model and scored by the latent
distance between the final predicted frame and the goal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from .config import PlanConfig
from .engine import WorldModel, rollout, step_generator
from .errors import DataError
from .formats import DatasetReader, atomic_write_bytes
from .kinematics import (ACTION_DIM, ActionStats, KinematicsEvents, NormalizationBounds, action_stats, arm_slots,
                         compute_action)
from .models import RunResult

LOGGER = "egoworld.planner"
ARM_DIM = 12

StatsSource = Union[ActionStats, Mapping[str, Tuple[np.ndarray, np.ndarray]]]
Evaluator = Callable[[np.ndarray, int], Tuple[np.ndarray, Optional[torch.Tensor]]]


def init_from_stats(stats: Optional[StatsSource], arm: str, result: Optional[RunResult] = None
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Initial CEM mean/variance (12-vectors) from dataset action statistics or a parsed table."""
    if stats is None:
        raise DataError("Planning needs action statistics to initialize the search.")
    if arm not in ("left", "right"):
        raise DataError(f"Unknown arm '{arm}'.")
    if isinstance(stats, ActionStats):
        mean, var = stats.arm(arm)
    else:
        if arm not in stats:
            raise DataError(f"Action statistics have no entry for the {arm} arm.")
        mean, var = (np.asarray(v, dtype=np.float64).copy() for v in stats[arm])
    if mean.shape != (ARM_DIM,) or var.shape != (ARM_DIM,):
        raise DataError(f"Arm statistics must be {ARM_DIM}-vectors.")
    negative = var < 0
    if negative.any():
        # Parsed tables may list negative "variances"; they cannot seed a Gaussian.
        if result is not None:
            result.add_log("WARN", "Clipped negative variances in action statistics.", count=int(negative.sum()))
        var = np.where(negative, 0.0, var)
    return mean, var


def dataset_action_stats(reader: DatasetReader, indices: Sequence[int], bounds: NormalizationBounds,
                         step_seconds: float) -> ActionStats:
    """Statistics of normalized next actions taken `step_seconds` apart across the given trajectories."""
    gap = max(1, int(round(step_seconds * reader.info.fps)))
    events = KinematicsEvents()
    actions = []
    for i in indices:
        poses = reader[int(i)].poses
        actions.extend(compute_action(poses[j], poses[j + gap], bounds, events=events)
                       for j in range(len(poses) - gap))
    return action_stats(actions, events)


def expand_candidate(delta: np.ndarray, horizon: int, step_seconds: float, arm: str = "right"
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """One arm delta -> (horizon, 48) actions with every other slot zero, and per-step timeskips."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape[-1] != ARM_DIM:
        raise DataError(f"Arm delta must have {ARM_DIM} components.")
    lead = delta.shape[:-1]
    actions = np.zeros((*lead, horizon, ACTION_DIM))
    actions[..., arm_slots(arm)] = delta[..., None, :]
    return actions, np.full((*lead, horizon), float(step_seconds))


def energy(pred: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
    """Mean squared latent distance over the trailing (N, C) dims; lower is closer to the goal."""
    if pred.shape[-2:] != goal.shape[-2:]:
        raise DataError(f"Prediction {tuple(pred.shape[-2:])} and goal {tuple(goal.shape[-2:])} latents differ.")
    return ((pred - goal.to(pred.dtype)) ** 2).mean(dim=(-2, -1))


def frame_energy(world: WorldModel, a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DataError(f"Frame shapes differ: {a.shape} vs {b.shape}.")
    return float(energy(world.encode(a), world.encode(b)).item())


@dataclass
class PlanState:
    mean: np.ndarray
    variance: np.ndarray
    iteration: int = 0
    elites: np.ndarray = field(default_factory=lambda: np.zeros((0, ARM_DIM)))
    best_delta: Optional[np.ndarray] = None
    best_energy: float = float("inf")
    history: List[float] = field(default_factory=list)  # best-so-far energy per iteration


@dataclass
class PlanResult(RunResult):
    state: Optional[PlanState] = None
    best_rollout: Optional[torch.Tensor] = None
    iteration_log: List[Dict[str, float]] = field(default_factory=list)


def refit(elites: np.ndarray, variance_floor: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, floored variance, raw variance) of the elite set."""
    mean = elites.mean(axis=0)
    raw = elites.var(axis=0)
    return mean, raw + variance_floor, raw


def cem_plan(evaluate: Evaluator, init_mean: np.ndarray, init_var: np.ndarray, cfg: PlanConfig) -> PlanResult:
    """Cross-entropy search over 12-D deltas.

    `evaluate(deltas (P, 12), iteration)` returns energies (P,) and optionally the rollouts
    (P, T, N, C) that produced them.
    """
    result = PlanResult(success=False, overall_message="", logger_name=LOGGER)
    if not 0.0 < cfg.elite_fraction < 1.0:
        raise DataError("elite_fraction must lie in (0, 1).")
    if np.any(np.asarray(init_var) < 0):
        raise DataError("CEM variance must be nonnegative.")
    rng = np.random.default_rng(cfg.seed)
    n_elite = max(1, int(round(cfg.population * cfg.elite_fraction)))
    state = PlanState(mean=np.asarray(init_mean, dtype=np.float64).copy(),
                      variance=np.asarray(init_var, dtype=np.float64).copy())
    for it in range(cfg.iterations):
        state.iteration = it
        deltas = state.mean + np.sqrt(state.variance) * rng.standard_normal((cfg.population, ARM_DIM))
        energies, rollouts = evaluate(deltas, it)
        energies = np.asarray(energies, dtype=np.float64)
        order = np.argsort(energies, kind="stable")
        best = int(order[0])
        if energies[best] < state.best_energy:
            state.best_energy = float(energies[best])
            state.best_delta = deltas[best].copy()
            if rollouts is not None:
                result.best_rollout = rollouts[best].detach().clone()
        state.history.append(state.best_energy)
        state.elites = deltas[order[:n_elite]]
        state.mean, state.variance, raw = refit(state.elites, cfg.variance_floor)
        result.iteration_log.append({"iteration": it, "best_energy": state.best_energy,
                                     "iteration_best": float(energies[best]), "mean_variance": float(raw.mean())})
        if float(raw.max()) < cfg.min_variance:
            result.add_log("INFO", "CEM variance collapsed; stopping early.", iteration=it)
            break
    result.state = state
    result.success = True
    result.overall_message = f"Best energy {state.best_energy:.6g} after {len(state.history)} iterations."
    result.add_log("INFO", result.overall_message)
    return result


def world_model_evaluator(world: WorldModel, context: torch.Tensor, goal: torch.Tensor, cfg: PlanConfig,
                          chunk: int = 8) -> Evaluator:
    """Evaluator rolling out every candidate from `context` (F, N, C) and scoring its last frame."""

    def evaluate(deltas: np.ndarray, iteration: int) -> Tuple[np.ndarray, torch.Tensor]:
        actions, timeskips = expand_candidate(deltas, cfg.horizon, cfg.step_seconds, cfg.arm)
        generator = step_generator(cfg.seed, iteration)
        outs = []
        for s in range(0, len(deltas), chunk):
            n = len(deltas[s:s + chunk])
            outs.append(rollout(world, context[None].expand(n, -1, -1, -1),
                                torch.as_tensor(actions[s:s + chunk]), torch.as_tensor(timeskips[s:s + chunk]),
                                generator=generator))
        preds = torch.cat(outs)
        return energy(preds[:, -1], goal).double().numpy(), preds

    return evaluate


def rank_candidates(world: WorldModel, context: torch.Tensor, goal: torch.Tensor,
                    candidates: Mapping[str, Tuple[np.ndarray, np.ndarray]], seed: int = 0) -> pd.DataFrame:
    """Roll out named explicit action sequences and rank them by goal energy (lowest first)."""
    if not candidates:
        raise DataError("No action candidates to rank.")
    rows = []
    for name, (actions, timeskips) in candidates.items():
        pred = rollout(world, context, torch.as_tensor(actions), torch.as_tensor(timeskips),
                       generator=torch.Generator().manual_seed(int(seed)))
        final = pred[-1] if len(pred) else context[-1]
        rows.append({"candidate": name, "steps": len(pred), "energy": float(energy(final, goal).item())})
    table = pd.DataFrame(rows).sort_values("energy", kind="stable").reset_index(drop=True)
    table["rank"] = np.arange(1, len(table) + 1)
    return table


def write_plan_outputs(result: PlanResult, world: WorldModel, cfg: PlanConfig, out_dir: Path) -> Dict[str, str]:
    """best_actions.csv, energy_history.csv and rollout_XX.png frames of the best candidate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = result.state
    if state is None or state.best_delta is None:
        raise DataError("Plan has no best candidate to write.")
    actions, timeskips = expand_candidate(state.best_delta, cfg.horizon, cfg.step_seconds, cfg.arm)
    best = pd.DataFrame(actions, columns=[f"a{i:02d}" for i in range(ACTION_DIM)])
    best.insert(0, "timeskip", timeskips)
    best.insert(0, "step", np.arange(cfg.horizon))
    paths = {"best_actions": out / "best_actions.csv", "energy_history": out / "energy_history.csv"}
    atomic_write_bytes(paths["best_actions"], best.to_csv(index=False).encode("utf-8"))
    atomic_write_bytes(paths["energy_history"],
                       pd.DataFrame(result.iteration_log).to_csv(index=False).encode("utf-8"))
    if result.best_rollout is not None:
        for i, frame in enumerate(world.decode(result.best_rollout)):
            path = out / f"rollout_{i:02d}.png"
            Image.fromarray(frame).save(path)
            paths[f"rollout_{i:02d}"] = path
    return {k: str(v) for k, v in paths.items()}
