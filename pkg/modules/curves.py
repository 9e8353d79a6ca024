"""Reward curves from progress CSVs: rolling statistics as CSV plus SVG charts."""

import logging
import os
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from modules.errors import CurveError  # noqa: E402
from modules.report import SCHEMA_COLUMN, SCHEMA_PREFIX  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 100
REWARD_COLUMN = "mean_episode_reward"
LOGGED_COLUMNS = ("rolling_mean", "rolling_std")


def rolling_stats(rewards: pd.Series, window: int = DEFAULT_WINDOW) -> pd.DataFrame:
    """Trailing-window mean and population std; early rows use whatever history exists."""
    roll = rewards.rolling(window, min_periods=1)
    return pd.DataFrame({
        "reward": rewards,
        "rolling_mean": roll.mean(),
        "rolling_std": roll.std(ddof=0),
    })


def has_logged_stats(frame: pd.DataFrame) -> bool:
    """True when the training loop already wrote the per-episode window statistics."""
    return all(c in frame.columns for c in LOGGED_COLUMNS) and bool(frame["rolling_mean"].notna().any())


def load_rewards(csv_path: str) -> pd.DataFrame:
    if not os.path.exists(csv_path):
        raise CurveError(f"CSV not found at {csv_path}")
    logger.info(f"Loading rewards from {csv_path}...")
    try:
        frame = pd.read_csv(csv_path)
    except pd.errors.EmptyDataError as e:
        raise CurveError(f"{csv_path} is empty") from e
    versions = [c for c in frame.columns if str(c).startswith(SCHEMA_PREFIX)]
    if versions and versions != [SCHEMA_COLUMN]:
        raise CurveError(f"{csv_path} uses schema {versions[0]}, expected {SCHEMA_COLUMN}")
    if REWARD_COLUMN not in frame.columns or "total_steps" not in frame.columns:
        raise CurveError(f"{csv_path} has no '{REWARD_COLUMN}' / 'total_steps' columns")
    keep = "rolling_mean" if has_logged_stats(frame) else REWARD_COLUMN
    frame = frame.dropna(subset=[keep])
    if frame.empty:
        raise CurveError(f"{csv_path} holds no episode rewards")
    return frame.reset_index(drop=True)


def curve_stats(frame: pd.DataFrame, window: int = DEFAULT_WINDOW) -> pd.DataFrame:
    """The band to draw: the logged columns when present, else a window over per-row rewards."""
    if has_logged_stats(frame):
        stats = pd.DataFrame({
            "reward": frame[REWARD_COLUMN].astype(float),
            "rolling_mean": frame["rolling_mean"].astype(float),
            "rolling_std": frame["rolling_std"].astype(float),
        })
    else:
        stats = rolling_stats(frame[REWARD_COLUMN].astype(float), window)
    stats.insert(0, "total_steps", frame["total_steps"].to_numpy())
    return stats


def _draw_band(ax, stats: pd.DataFrame, label: str):
    steps = stats["total_steps"]
    mean, std = stats["rolling_mean"], stats["rolling_std"]
    line, = ax.plot(steps, mean, linewidth=1.5, label=label)
    ax.fill_between(steps, mean - std, mean + std, alpha=0.25, linewidth=0, color=line.get_color())


def _save(fig, ax, title: str, svg_path: str):
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode reward")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def export_curve(csv_path: str, out_dir: Optional[str] = None, window: int = DEFAULT_WINDOW) -> str:
    stats = curve_stats(load_rewards(csv_path), window)

    out_dir = out_dir or os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(csv_path))[0]
    stats_path = os.path.join(out_dir, f"{stem}.rolling.csv")
    svg_path = os.path.join(out_dir, f"{stem}.svg")
    stats.to_csv(stats_path, index=False, float_format="%.17g")

    fig, ax = plt.subplots(figsize=(7, 4))
    _draw_band(ax, stats, f"rolling mean ({window})")
    _save(fig, ax, stem, svg_path)

    logger.info(f"Wrote {svg_path} and {stats_path}")
    return svg_path


def export_curves(csv_paths: Sequence[str], out_dir: Optional[str] = None,
                  window: int = DEFAULT_WINDOW) -> List[str]:
    if not csv_paths:
        raise CurveError("no CSV files given")
    return [export_curve(path, out_dir, window) for path in csv_paths]


def export_comparison(csv_paths: Sequence[str], labels: Sequence[str], svg_path: str,
                      title: str = "", window: int = DEFAULT_WINDOW) -> str:
    """One chart overlaying several runs on the same environment, one band per run."""
    if not csv_paths:
        raise CurveError("no CSV files given")
    if len(labels) != len(csv_paths):
        raise CurveError(f"{len(csv_paths)} CSV files but {len(labels)} labels")
    frames = [curve_stats(load_rewards(path), window) for path in csv_paths]

    os.makedirs(os.path.dirname(os.path.abspath(svg_path)), exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for stats, label in zip(frames, labels):
        _draw_band(ax, stats, label)
    _save(fig, ax, title or os.path.splitext(os.path.basename(svg_path))[0], svg_path)
    logger.info(f"Wrote {svg_path}")
    return svg_path
