"""PNG figures for metric reports, written next to the text/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import METRIC_KEYS  # noqa: E402

_PNG_META = {"Software": None}


def plot_report(report: dict, path) -> Path:
    """Bar chart of one metric report."""
    keys = [k for k in METRIC_KEYS if k in report]
    vals = [100.0 * report[k] for k in keys]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(keys, vals, color="#4C72B0")
    for x, v in enumerate(vals):
        ax.text(x, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("score (%)")
    ax.set_title(f"{report.get('mode', '')} / {report.get('split', '')}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_ablation(reports: dict, path, metrics=("mAP", "R@50", "R@100")) -> Path:
    """Grouped bars: one group per metric, one bar per mode."""
    modes = list(reports)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(metrics))
    for i, m in enumerate(modes):
        ax.bar(x + i * width, [100.0 * reports[m][k] for k in metrics], width, label=m)
    ax.set_xticks(x + width * (len(modes) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("score (%)")
    ax.legend(fontsize=8, ncol=len(modes))
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
