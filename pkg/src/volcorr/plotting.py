"""Figures written next to the CSV outputs (headless backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import TERMS  # noqa: E402


def plot_accuracy_curve(reports, path, labels=None, title="Correspondence accuracy"):
    """One curve per report: fraction of points under each error threshold."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, rep in enumerate(reports):
        lab = labels[i] if labels else f"{rep.protocol} (mean {rep.mean:.3f})"
        ax.plot(rep.thresholds, rep.curve, label=lab)
    ax.set_xlabel("normalized error threshold")
    ax.set_ylabel("fraction of points")
    ax.set_ylim(0, 1.02)
    ax.set_xlim(rep.thresholds[0], rep.thresholds[-1])
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history, path, title="Training energy"):
    """Per-term values and the weighted total against the step count (log scale)."""
    steps = np.array([row["step"] for row in history])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(steps, [row["total"] for row in history], color="k", lw=0.8)
    a1.set_yscale("log")
    a1.set_xlabel("step")
    a1.set_ylabel("total")
    for term in TERMS:
        vals = np.array([row[term] for row in history])
        if np.any(vals > 0):
            a2.plot(steps, np.maximum(vals, 1e-12), lw=0.8, label=term)
    a2.set_yscale("log")
    a2.set_xlabel("step")
    a2.legend(fontsize=8)
    for ax in (a1, a2):
        ax.grid(alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
