"""Figures for evaluation reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import AXES, EvalReport  # noqa: E402

STYLE = {
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "font.size": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_pr_curves(report: EvalReport, path, max_legend: int = 8) -> Path:
    """One panel per axis with the IoU-0.5 precision/recall curve of every class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.4), sharey=True)
        for ax, axis in zip(axes, AXES):
            curves = report.pr_curves.get(axis, {})
            for i, (label, (rec, prec)) in enumerate(curves.items()):
                ax.step([0.0] + list(rec), [1.0] + list(prec), where="post", lw=1,
                        label=label if i < max_legend else None)
            ax.set_title(f"{axis}  AP50={report.ap(axis, at50=True):.3f}")
            ax.set_xlabel("recall")
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.02)
            if curves and len(curves) <= max_legend:
                ax.legend(loc="lower left", frameon=False)
        axes[0].set_ylabel("precision")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_ablation(rows: Sequence[Dict], path) -> Path:
    """Grouped bars of the three AP axes for each ablation row (``name`` plus ``ap_<axis>`` keys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names: List[str] = [r["name"] for r in rows]
    width = 0.8 / len(AXES)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(rows) + 1), 3.2))
        for k, axis in enumerate(AXES):
            xs = [i + (k - 1) * width for i in range(len(rows))]
            ax.bar(xs, [r[f"ap_{axis}"] for r in rows], width, label=f"AP-{axis}")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("AP")
        ax.legend(frameon=False, ncol=3, loc="upper left")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
