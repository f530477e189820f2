"""Matplotlib renderings for reports: training loss curves and PR curves.

Everything draws through the Agg backend so the package works headless;
figures land on disk next to the delimited outputs they illustrate.
"""

from __future__ import annotations

import io
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .util import atomic_write  # noqa: E402


def _save(fig, path) -> None:
    """Render to memory and write atomically, format taken from the suffix."""
    fmt = os.path.splitext(str(path))[1].lstrip(".").lower() or "svg"
    buf = io.BytesIO()
    fig.savefig(buf, format=fmt)
    plt.close(fig)
    atomic_write(str(path), buf.getvalue())


def render_loss_curve(log, path) -> None:
    """Per-epoch mean loss on a log-scaled y axis, decay points marked."""
    if len(log) == 0:
        raise ValueError("empty training log")
    epochs = [entry.epoch for entry in log]
    losses = [entry.mean_total_loss for entry in log]
    lrs = [entry.lr for entry in log]

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(epochs, losses, marker="o", markersize=3, linewidth=1.2,
            color="tab:blue")
    for i in range(1, len(lrs)):
        if lrs[i] != lrs[i - 1]:
            ax.axvline(epochs[i], color="tab:gray", linestyle=":",
                       linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def render_pr_curve(report, path) -> None:
    """Recall/precision trace over the threshold sweep, ODS point marked."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.plot(report.recall, report.precision, marker=".", markersize=4,
            linewidth=1.0, color="tab:red")
    ods_idx = report.thresholds.index(report.ods_threshold)
    ax.plot([report.recall[ods_idx]], [report.precision[ods_idx]],
            marker="*", markersize=12, color="tab:blue",
            label=f"ODS F={report.ods_f:.3f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_title("precision-recall")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    _save(fig, path)
