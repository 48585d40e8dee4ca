"""Optional matplotlib renderings of training logs and overlap matrices."""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_steplog(steplog, path: str | Path) -> None:
    """Loss and alignment curves over training steps."""
    steps = steplog.column("step")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(steps, steplog.column("total"), label="total")
    axes[0].plot(steps, steplog.column("l_c"), label="classification")
    axes[0].set_xlabel("step")
    axes[0].legend()
    if "s_cs" in steplog.keys:
        for key in ("l_dec", "s_cs", "s_cd", "s_p"):
            axes[1].plot(steps, steplog.column(key), label=key)
        axes[1].set_xlabel("step")
        axes[1].legend()
    else:
        axes[1].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_overlap(matrix: np.ndarray, classes, path: str | Path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, cmap="viridis")
    labels = [str(c) for c in classes]
    ax.set_xticks(range(len(labels)), labels, rotation=90)
    ax.set_yticks(range(len(labels)), labels)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center", fontsize=7)
    if title:
        ax.set_title(title)
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
