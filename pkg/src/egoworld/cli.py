"""EgoWorld command line: subcommands, run manifests and exit codes."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import yaml
from PIL import Image

from .core.config import RunConfig, config_hash, dump_config, load_config
from .core.engine import WorldModel, fit, rollout_frames
from .core.errors import ConfigError, DataError, EgoWorldError
from .core.evalkit import (EvalResult, MetricReport, baseline_predictors, eval_atomic, eval_horizon_curve,
                           eval_single_step, make_eval_item, psnr)
from .core.formats import DatasetReader, atomic_write_bytes, atomic_write_text, split_indices, write_dataset
from .core.kinematics import (ATOMIC_LABELS, AtomicThresholds, balance_segments, extract_atomic_segments,
                              load_action_stats_table, write_segments_csv)
from .core.models import RunResult
from .core.planner import (cem_plan, dataset_action_stats, expand_candidate, frame_energy, init_from_stats,
                           rank_candidates, world_model_evaluator, write_plan_outputs)
from .core.plots import plot_atomic_bars, plot_horizon_curve
from .core.selftests import EgoWorldSelfTests
from .core.synthworld import generate_dataset

LOGGER = "egoworld.cli"
CODE_VERSION = "1.0.0"
THREADS_ENV = "EGOWORLD_NUM_THREADS"
MANIFEST_NAME = "run_manifest.json"
DATASET_NAME = "dataset.bin"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

PROTOCOLS = ("single_step", "horizon", "atomic")

log = logging.getLogger(LOGGER)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    started: float
    finished: float = 0.0
    config_hash: str = ""
    code_version: str = CODE_VERSION
    exit_code: int = EXIT_OK
    message: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    logs: List[Dict[str, Any]] = field(default_factory=list)
    out_dir: Optional[str] = None

    def write(self) -> Optional[Path]:
        if not self.out_dir:
            return None
        path = Path(self.out_dir) / MANIFEST_NAME
        atomic_write_text(path, json.dumps(asdict(self), indent=2, default=str))
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------- Shared plumbing ----------------

def _parse_set(items: Optional[Sequence[str]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' must look like section.key=value.")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _config(args: argparse.Namespace, **flags: Any) -> RunConfig:
    overrides = {k: v for k, v in flags.items() if v is not None}
    overrides.update(_parse_set(getattr(args, "set", None)))
    return load_config(getattr(args, "config", None), overrides)


def _write_config(cfg: RunConfig, out: Path, manifest: RunManifest) -> None:
    path = out / "config.resolved.yaml"
    atomic_write_text(path, dump_config(cfg))
    manifest.config_hash = config_hash(cfg)
    manifest.outputs["config"] = str(path)


def _out_dir(path: str, manifest: RunManifest) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest.out_dir = str(out)
    return out


def _dataset(path: str) -> DatasetReader:
    if not Path(path).is_file():
        raise DataError(f"Dataset not found: {path}")
    return DatasetReader(path)


def _checkpoint(path: str, use_ema: bool = True) -> WorldModel:
    if not (Path(path) / "manifest.txt").is_file():
        raise DataError(f"Checkpoint not found: {path} (expected a directory with manifest.txt)")
    return WorldModel.load(Path(path), use_ema=use_ema)


def _with_sections(world: WorldModel, args: argparse.Namespace, **fields: Dict[str, Any]) -> None:
    """Take eval/atomic/plan sections from --config, then apply per-flag overrides on the checkpoint config."""
    if getattr(args, "config", None):
        file_cfg = load_config(args.config)
        world.cfg = replace(world.cfg, eval=file_cfg.eval, atomic=file_cfg.atomic, plan=file_cfg.plan)
    for section, values in fields.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            world.cfg = replace(world.cfg, **{section: replace(getattr(world.cfg, section), **values)})


def _frame_ref(ref: str) -> Tuple[int, int]:
    try:
        traj, frame = ref.split(":")
        return int(traj), int(frame)
    except ValueError:
        raise ConfigError(f"Frame reference '{ref}' must look like TRAJ_INDEX:FRAME.") from None


def _frames_at(reader: DatasetReader, ref: str, count: int = 1) -> np.ndarray:
    index, frame = _frame_ref(ref)
    if not 0 <= index < len(reader):
        raise DataError(f"Trajectory index {index} outside dataset of {len(reader)}.")
    traj = reader[index]
    if not 0 <= frame < len(traj):
        raise DataError(f"Frame {frame} outside trajectory of {len(traj)} frames.")
    return traj.frames[max(0, frame - count + 1):frame + 1]


def _goal_frame(reader: DatasetReader, ref: str) -> np.ndarray:
    if ref.lower().endswith(".png"):
        if not Path(ref).is_file():
            raise DataError(f"Goal image not found: {ref}")
        frame = np.asarray(Image.open(ref).convert("RGB"), dtype=np.uint8)
        res = reader.info.resolution
        if frame.shape != (res, res, 3):
            raise DataError(f"Goal image is {frame.shape[1]}x{frame.shape[0]}, dataset frames are {res}x{res}.")
        return frame
    return _frames_at(reader, ref)[-1]


def _save_png(frame: np.ndarray, path: Path, manifest: RunManifest, key: str) -> None:
    Image.fromarray(frame).save(path)
    manifest.outputs[key] = str(path)


# ---------------- Commands ----------------

def cmd_gen_data(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    out = _out_dir(args.out, manifest)
    cfg = _config(args, **{"data.seed": args.seed, "data.trajectories": args.trajectories, "data.frames": args.frames,
                           "data.fps": args.fps, "data.resolution": args.resolution, "data.workers": args.workers})
    _write_config(cfg, out, manifest)
    trajectories, result = generate_dataset(cfg.data, progress=args.progress)
    path = out / DATASET_NAME
    checksum = write_dataset(trajectories, path, seed=cfg.data.seed)
    manifest.outputs["dataset"] = str(path)
    result.summary["sha256"] = checksum
    result.add_log("INFO", "Dataset written.", path=str(path), sha256=checksum)
    return result


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    out = _out_dir(args.out, manifest)
    cfg = _config(args, **{"train.steps": args.steps, "train.seed": args.seed, "train.workers": args.workers})
    _dataset(args.data)
    if args.resume and not (Path(args.resume) / "manifest.txt").is_file():
        raise DataError(f"Checkpoint not found: {args.resume}")
    _write_config(cfg, out, manifest)
    result = fit(cfg, args.data, out, resume=args.resume, progress=args.progress)
    manifest.outputs.update({f"checkpoint_{k}": v for k, v in result.checkpoints.items()})
    manifest.outputs["metrics"] = str(out / "metrics.csv")
    return result


def cmd_eval(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    out = _out_dir(args.out, manifest)
    world = _checkpoint(args.checkpoint, use_ema=not args.no_ema)
    _with_sections(world, args, eval={"samples": args.samples, "seed": args.seed, "max_sequences": args.max_sequences,
                                      "horizon_seconds": args.horizon_seconds})
    reader = _dataset(args.data)
    _write_config(world.cfg, out, manifest)
    result = EvalResult(success=False, overall_message="", logger_name="egoworld.evalkit")
    _, held = split_indices(reader.traj_ids(), world.cfg.eval.train_fraction)
    if not held:
        raise DataError("Held-out split is empty; nothing to evaluate.")
    predictors = baseline_predictors(world, reader, held)
    runners: Dict[str, Callable[..., MetricReport]] = {
        "single_step": eval_single_step, "horizon": eval_horizon_curve, "atomic": eval_atomic,
    }
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    for protocol in protocols:
        reports = [runners[protocol](world, p, reader, held, progress=args.progress, result=result) for p in predictors]
        report = MetricReport.concat(reports)
        result.reports[protocol] = report
        manifest.outputs[protocol] = str(report.to_csv(out / f"{protocol}.csv"))
        table = report.aggregate()
        if table.empty:
            result.add_log("WARN", "Protocol produced no rows.", protocol=protocol)
            continue
        if protocol == "horizon":
            manifest.outputs["horizon_plot"] = str(plot_horizon_curve(table, out / "horizon_curve.png"))
        elif protocol == "atomic":
            manifest.outputs["atomic_plot"] = str(plot_atomic_bars(table, out / "atomic_bars.png"))
        result.summary[protocol] = table.groupby("predictor", sort=False)["latent_mse_mean"].mean().round(6).to_dict()
    result.success = True
    result.overall_message = f"Evaluated {len(predictors)} predictors on {len(held)} held-out trajectories."
    result.add_log("INFO", result.overall_message, protocols=",".join(protocols))
    return result


def cmd_rollout(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    if args.steps < 1:
        raise ConfigError("Rollout needs at least one step.", field="--steps")
    out = _out_dir(args.out, manifest)
    world = _checkpoint(args.checkpoint, use_ema=not args.no_ema)
    reader = _dataset(args.data)
    _write_config(world.cfg, out, manifest)
    result = RunResult(success=False, overall_message="", logger_name=LOGGER)
    index, last = _frame_ref(args.start)
    if not 0 <= index < len(reader):
        raise DataError(f"Trajectory index {index} outside dataset of {len(reader)}.")
    traj = reader[index]
    gap = max(1, int(round(args.step_seconds * traj.fps)))
    targets = [last + gap * (i + 1) for i in range(args.steps)]
    if last < 0 or (targets and targets[-1] >= len(traj)):
        raise DataError(f"Rollout of {args.steps} steps from frame {last} runs past {len(traj)} frames.")
    item = make_eval_item(traj, world, last, targets, "rollout")
    pred = rollout_frames(world, traj.frames[item.context_index], torch.as_tensor(item.actions),
                          torch.as_tensor(item.timeskips), seed=args.seed, progress=args.progress)
    rows = []
    for i, target in enumerate(item.target_index):
        _save_png(pred[i], out / f"pred_{i:02d}.png", manifest, f"pred_{i:02d}")
        _save_png(traj.frames[target], out / f"gt_{i:02d}.png", manifest, f"gt_{i:02d}")
        rows.append({"step": i, "frame": int(target), "seconds": float(item.timeskips[:i + 1].sum()),
                     "psnr": psnr(pred[i], traj.frames[target])})
    if rows:
        strip = np.concatenate([np.concatenate([traj.frames[t] for t in item.target_index], axis=1),
                                np.concatenate(list(pred), axis=1)], axis=0)
        _save_png(strip, out / "rollout_strip.png", manifest, "strip")
    table = pd.DataFrame(rows, columns=["step", "frame", "seconds", "psnr"])
    atomic_write_bytes(out / "rollout.csv", table.to_csv(index=False).encode("utf-8"))
    manifest.outputs["rollout"] = str(out / "rollout.csv")
    result.success = True
    result.overall_message = f"Rolled out {len(rows)} steps from trajectory {traj.traj_id} frame {last}."
    result.summary = {"steps": len(rows), "mean_psnr": float(table["psnr"].mean()) if rows else None}
    result.add_log("INFO", result.overall_message, **result.summary)
    return result


def cmd_plan(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    out = _out_dir(args.out, manifest)
    world = _checkpoint(args.checkpoint, use_ema=not args.no_ema)
    _with_sections(world, args, plan={"arm": args.arm, "iterations": args.iters, "population": args.pop,
                                      "seed": args.seed, "horizon": args.horizon})
    cfg = world.cfg.plan
    reader = _dataset(args.data)
    _write_config(world.cfg, out, manifest)

    context_frames = _frames_at(reader, args.context, world.context_frames)
    goal_frame = _goal_frame(reader, args.goal)
    context, goal = world.encode(context_frames), world.encode(goal_frame)
    start_energy = frame_energy(world, context_frames[-1], goal_frame)

    if args.stats:
        stats = load_action_stats_table(args.stats)
    else:
        train_idx, _ = split_indices(reader.traj_ids(), world.cfg.eval.train_fraction)
        stats = dataset_action_stats(reader, train_idx, world.bounds, cfg.step_seconds)
    mean, var = init_from_stats(stats, cfg.arm)
    result = cem_plan(world_model_evaluator(world, context, goal, cfg), mean, var, cfg)
    result.add_log("INFO", "Goal energy of the unchanged context.", energy=start_energy)
    manifest.outputs.update(write_plan_outputs(result, world, cfg, out))

    state = result.state
    candidates = {name: expand_candidate(delta, cfg.horizon, cfg.step_seconds, cfg.arm)
                  for name, delta in (("best", state.best_delta), ("final_mean", state.mean),
                                      ("still", np.zeros_like(state.mean)))}
    ranking = rank_candidates(world, context, goal, candidates, seed=cfg.seed)
    atomic_write_bytes(out / "candidates.csv", ranking.to_csv(index=False).encode("utf-8"))
    manifest.outputs["candidates"] = str(out / "candidates.csv")
    result.summary = {"best_energy": state.best_energy, "start_energy": start_energy,
                      "iterations": len(state.history), "arm": cfg.arm}
    return result


def cmd_atomic_extract(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    out = _out_dir(args.out, manifest)
    cfg = _config(args, **{"atomic.window_seconds": args.window_seconds, "atomic.cap_per_label": args.cap,
                           "atomic.seed": args.seed})
    reader = _dataset(args.data)
    _write_config(cfg, out, manifest)
    a = cfg.atomic
    result = RunResult(success=False, overall_message="", logger_name="egoworld.kinematics")
    thresholds = AtomicThresholds(hand=a.hand_threshold, forward=a.forward_threshold, rotate=a.rotate_threshold)
    found = []
    short = 0
    for traj in reader:
        window = max(2, int(round(a.window_seconds * traj.fps)))
        if len(traj) < window:
            short += 1
            continue
        found.extend((traj.traj_id, seg) for seg in extract_atomic_segments(traj.poses, thresholds, window))
    if short:
        result.add_log("WARN", "Skipped trajectories shorter than the atomic window.", skipped=short)
    balanced = balance_segments(found, a.cap_per_label, a.seed)
    write_segments_csv([seg for _, seg in balanced], str(out / "segments.csv"), [tid for tid, _ in balanced])
    counts = pd.DataFrame({"label": list(ATOMIC_LABELS),
                           "found": [sum(s.label == lb for _, s in found) for lb in ATOMIC_LABELS],
                           "kept": [sum(s.label == lb for _, s in balanced) for lb in ATOMIC_LABELS]})
    atomic_write_bytes(out / "label_counts.csv", counts.to_csv(index=False).encode("utf-8"))
    manifest.outputs.update({"segments": str(out / "segments.csv"), "label_counts": str(out / "label_counts.csv")})
    absent = counts.loc[counts["kept"] == 0, "label"].tolist()
    if absent:
        result.add_log("INFO", "Atomic labels without segments.", absent=",".join(absent))
    result.success = True
    result.overall_message = f"Kept {len(balanced)} of {len(found)} atomic segments."
    result.summary = {"found": len(found), "kept": len(balanced)}
    result.add_log("INFO", result.overall_message)
    return result


def cmd_plot(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    if not Path(args.report).is_file():
        raise DataError(f"Report not found: {args.report}")
    table = pd.read_csv(args.report)
    kind = args.kind
    if kind == "auto":
        kind = "atomic" if set(table.get("group", pd.Series(dtype=str))) & set(ATOMIC_LABELS) else "horizon"
    out = Path(args.out)
    manifest.out_dir = str(out.parent)
    plot = plot_atomic_bars if kind == "atomic" else plot_horizon_curve
    manifest.outputs["plot"] = str(plot(table, out, metric=args.metric))
    result = RunResult(success=True, overall_message=f"Wrote {kind} plot.", logger_name=LOGGER)
    result.add_log("INFO", result.overall_message, path=str(out))
    return result


def cmd_selftest(args: argparse.Namespace, manifest: RunManifest) -> RunResult:
    ok, report = EgoWorldSelfTests.run()
    print(report)
    result = RunResult(success=ok, overall_message="Self tests passed." if ok else "Self tests failed.",
                       logger_name=LOGGER)
    result.summary["report"] = report
    return result


def cmd_view(args: argparse.Namespace, manifest: RunManifest) -> int:
    from PyQt6.QtGui import QFont
    from PyQt6.QtWidgets import QApplication

    from .ui.main_window import MainWindow

    app = QApplication(sys.argv[:1])
    app.setFont(QFont("Consolas", 10))
    w = MainWindow(dataset=args.data, checkpoint=args.checkpoint, report=args.report)
    w.show()
    return app.exec()


# ---------------- Parser ----------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="sectioned YAML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
    p.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egoworld", description="Egocentric whole-body world model toolkit.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic egocentric dataset")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--fps", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output directory (dataset.bin)")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a world model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and the reference baselines")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default="all", choices=["all", *PROTOCOLS])
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-sequences", type=int)
    p.add_argument("--horizon-seconds", type=float)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("rollout", help="roll a checkpoint forward along recorded actions")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--start", required=True, metavar="TRAJ:FRAME", help="last context frame")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--step-seconds", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(handler=cmd_rollout)

    p = sub.add_parser("plan", help="plan an arm motion toward a goal frame")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--context", required=True, metavar="TRAJ:FRAME")
    p.add_argument("--goal", required=True, metavar="TRAJ:FRAME|IMAGE.png")
    p.add_argument("--arm", choices=["left", "right"])
    p.add_argument("--iters", type=int)
    p.add_argument("--pop", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--stats", help="arm statistics table (CSV) instead of dataset statistics")
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("atomic-extract", help="label atomic-action segments in a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-seconds", type=float)
    p.add_argument("--cap", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_atomic_extract)

    p = sub.add_parser("plot", help="plot an aggregated report CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--kind", default="auto", choices=["auto", "horizon", "atomic"])
    p.add_argument("--metric", default="latent_mse", choices=["latent_mse", "psnr"])
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser("selftest", help="run the in-process self tests")
    p.set_defaults(handler=cmd_selftest)

    p = sub.add_parser("view", help="open the desktop viewer")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--report")
    p.set_defaults(handler=None)
    return parser


def configure_threads(environ: Optional[Dict[str, str]] = None) -> Optional[int]:
    value = (environ if environ is not None else os.environ).get(THREADS_ENV)
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{value}'.") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1.")
    torch.set_num_threads(threads)
    return threads


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    manifest = RunManifest(command=args.command, argv=argv, started=time.time())
    try:
        configure_threads()
        if args.handler is None:
            return cmd_view(args, manifest)
        result = args.handler(args, manifest)
        manifest.exit_code = EXIT_OK if result.success else (EXIT_DATA if args.command == "selftest" else EXIT_RUNTIME)
        manifest.message = result.overall_message
        manifest.summary = result.summary
        manifest.logs = result.logs
    except EgoWorldError as e:
        log.error("%s failed: %s", args.command, e)
        manifest.exit_code = e.exit_code
        manifest.message = str(e)
    except Exception as e:
        log.exception("%s failed unexpectedly", args.command)
        manifest.exit_code = EXIT_RUNTIME
        manifest.message = f"{type(e).__name__}: {e}"
    manifest.finished = time.time()
    try:
        manifest.write()
    except OSError as e:
        log.error("Could not write run manifest: %s", e)
    return manifest.exit_code
