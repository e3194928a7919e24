"""Report figures.  Rendered off-screen to image files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curves(curves, path, title="training loss", ylabel="loss"):
    """``curves`` maps a label to a sequence of ``(trees, loss)`` points."""
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label, points in curves.items():
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            ax.plot(xs, ys, marker="o", markersize=3, label=label)
        ax.set_xlabel("trees")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        if len(curves) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)


def plot_class_counts(true_counts, pred_counts, path, title="class counts"):
    """Side-by-side bars of label vs predicted class frequencies."""
    classes = sorted(set(true_counts) | set(pred_counts))
    pos = range(len(classes))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(classes) + 2), 4))
    try:
        ax.bar([p - 0.2 for p in pos], [true_counts.get(c, 0) for c in classes],
               width=0.4, label="label")
        ax.bar([p + 0.2 for p in pos], [pred_counts.get(c, 0) for c in classes],
               width=0.4, label="predicted")
        ax.set_xticks(list(pos))
        ax.set_xticklabels([str(c) for c in classes])
        ax.set_xlabel("class")
        ax.set_ylabel("examples")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)


def plot_residuals(y, pred, path, title="predictions"):
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        ax.scatter(y, pred, s=6, alpha=0.5)
        if len(y):
            lo, hi = float(min(y.min(), pred.min())), float(max(y.max(), pred.max()))
            ax.plot([lo, hi], [lo, hi], color="gray", lw=1)
        ax.set_xlabel("label")
        ax.set_ylabel("prediction")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
