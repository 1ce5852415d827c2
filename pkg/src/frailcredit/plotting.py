"""PNG figures for backtest output.

Figures are written with the Agg backend and without a software tag so that
reruns produce identical files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def plot_cap_curves(curves: dict, path, title: str = "") -> None:
    """One CAP per entry of ``curves`` (label -> CapCurve) plus the diagonal."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", linewidth=1, label="random")
    for label, c in curves.items():
        ax.plot(c.x, c.y, linewidth=1.4, label=str(label))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("fraction of firms (ranked by predicted PD)")
    ax.set_ylabel("fraction of defaulters captured")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_ar_by_horizon(report, path) -> None:
    """Average accuracy ratio per horizon for every model in a backtest report."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for model in report.models:
        hs = [h for h in report.horizons if not math.isnan(report.average(model, h))]
        ax.plot(hs, [report.average(model, h) for h in hs], marker="o", label=model)
    ax.set_xticks(list(report.horizons))
    ax.set_xlabel("prediction horizon (years)")
    ax.set_ylabel("average accuracy ratio")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
