"""EgoWorld core: report figures."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import DataError  # noqa: E402
from .kinematics import ATOMIC_LABELS  # noqa: E402

Table = Union[pd.DataFrame, str, Path]


def _table(source: Table) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        return source
    try:
        return pd.read_csv(source)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read report {source}: {e}") from e


def _seconds(group: str) -> float:
    return float(str(group).rstrip("s"))


def plot_horizon_curve(source: Table, path: Union[str, Path], metric: str = "latent_mse") -> Path:
    """Metric mean +- standard error against horizon seconds, one line per predictor."""
    table = _table(source)
    if table.empty:
        raise DataError("Horizon report is empty.")
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, chunk in table.groupby("predictor", sort=False):
        chunk = chunk.assign(seconds=chunk["group"].map(_seconds)).sort_values("seconds")
        mean = chunk[f"{metric}_mean"].to_numpy(dtype=float)
        err = chunk[f"{metric}_stderr"].to_numpy(dtype=float)
        ax.plot(chunk["seconds"], mean, marker="o", label=name)
        ax.fill_between(chunk["seconds"], mean - err, mean + err, alpha=0.2)
    ax.set_xlabel("horizon (s)")
    ax.set_ylabel(metric.replace("_", " "))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_atomic_bars(source: Table, path: Union[str, Path], metric: str = "latent_mse") -> Path:
    """Grouped bars per atomic label; labels without segments are left out."""
    table = _table(source)
    if table.empty:
        raise DataError("Atomic report is empty.")
    labels = [lb for lb in ATOMIC_LABELS if lb in set(table["group"])]
    predictors = list(dict.fromkeys(table["predictor"]))
    width = 0.8 / max(1, len(predictors))
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, len(labels) * 0.9), 4))
    for i, name in enumerate(predictors):
        chunk = table[table["predictor"] == name].set_index("group")
        mean = [float(chunk.loc[lb, f"{metric}_mean"]) if lb in chunk.index else np.nan for lb in labels]
        err = [float(chunk.loc[lb, f"{metric}_stderr"]) if lb in chunk.index else 0.0 for lb in labels]
        ax.bar(x + i * width, mean, width, yerr=err, label=name, capsize=2)
    ax.set_xticks(x + width * (len(predictors) - 1) / 2)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
