"""Figures for alignment dumps and training runs, written straight to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOG_COLUMNS = ("epoch", "lr", "coarse", "fine", "cls", "verify_auc")


def parse_metrics_log(text: str) -> dict[str, np.ndarray]:
    rows = [line.split("\t") for line in text.splitlines() if line.strip()]
    table = np.array(rows, dtype=np.float64).reshape(-1, len(LOG_COLUMNS))
    return {name: table[:, i] for i, name in enumerate(LOG_COLUMNS)}


def plot_alignment(sim: np.ndarray, labels, path, gt=None, title: str = "") -> Path:
    """Frame x sentence similarity heatmap with the pseudo-label path on top."""
    sim = np.asarray(sim)
    n, k = sim.shape
    fig, ax = plt.subplots(figsize=(3 + 0.35 * k, 2 + 0.2 * n))
    im = ax.imshow(sim, aspect="auto", cmap="viridis", interpolation="nearest")
    frames = np.arange(n)
    ax.plot(labels, frames, "w-o", ms=3, lw=1.2, label="pseudo")
    if gt is not None:
        ax.plot(gt, frames, "r--", lw=1.0, label="ground truth")
    ax.set_xlabel("sentence")
    ax.set_ylabel("frame")
    ax.set_xticks(range(k))
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(loc="lower right", fontsize=7, framealpha=0.6)
    fig.colorbar(im, ax=ax, fraction=0.05)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(log: dict[str, np.ndarray], path) -> Path:
    """Loss terms on the left, verification AUC on the right."""
    epoch = log["epoch"]
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3))
    for name in ("coarse", "fine", "cls"):
        if np.any(log[name] != 0):
            left.plot(epoch, log[name], label=name)
    left.set_xlabel("epoch")
    left.set_ylabel("loss")
    left.legend(fontsize=8)
    auc = log["verify_auc"]
    keep = np.isfinite(auc)
    right.plot(epoch[keep], auc[keep], "k.-")
    right.axhline(0.5, color="grey", lw=0.8, ls=":")
    right.set_ylim(0.0, 1.02)
    right.set_xlabel("epoch")
    right.set_ylabel("verification AUC")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
