"""
Static plots of training curves, sweep results and the proxy ablation
"""

import logging
from pathlib import Path
from typing import List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from tvts.errors import DataError  # noqa: E402

logger = logging.getLogger(__name__)

CURVES = ("L_total", "L_align", "L_sort", "sort_acc", "lr", "grad_norm", "grad_norm_align", "grad_norm_sort")
# PNG metadata otherwise carries the matplotlib version
_PNG_METADATA = {"Software": None}


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise DataError(f"metrics log {path} is empty")
    try:
        frame = pd.read_json(path, lines=True)
    except ValueError as exc:
        raise DataError(f"metrics log {path} is not line-delimited JSON: {exc}") from exc
    if "step" not in frame.columns:
        raise DataError(f"metrics log {path} has no step column")
    return frame.sort_values("step", kind="stable").reset_index(drop=True)


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_metrics(metrics_path: Union[str, Path], out_dir: Union[str, Path]) -> List[Path]:
    """One PNG per logged metric, value against step; phases drawn as separate lines"""
    frame = read_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in CURVES:
        if metric not in frame.columns or frame[metric].isna().all():
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = frame.groupby("phase", sort=False) if "phase" in frame.columns else [("", frame)]
        for phase, part in groups:
            ax.plot(part["step"], part[metric], label=str(phase) or metric, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.set_title(metric)
        ax.grid(alpha=0.3)
        if "phase" in frame.columns and frame["phase"].nunique() > 1:
            ax.legend()
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"{metric}.png"))
    logger.info(f"✅ Wrote {len(written)} plots to {out_dir}")
    return written


def plot_sweep(frame: pd.DataFrame, key: str, path: Union[str, Path]) -> Path:
    """Probe top-1 (and held-out sort accuracy when present) against the swept value"""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame["value"], frame["probe_top1"], marker="o", label="linear probe top-1")
    if "sort_accuracy" in frame.columns and frame["sort_accuracy"].notna().any():
        ax.plot(frame["value"], frame["sort_accuracy"], marker="s", label="held-out sort accuracy")
    ax.set_xlabel(key)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_ablation(summary: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Mean probe top-1 per arm with the seed standard deviation as error bars"""
    fig, ax = plt.subplots(figsize=(6, 4))
    arms = list(summary.index)
    ax.bar(arms, summary["probe_top1"], yerr=summary["probe_std"].fillna(0.0), capsize=4, color="tab:blue")
    ax.set_xlabel("arm")
    ax.set_ylabel("linear probe top-1")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))
