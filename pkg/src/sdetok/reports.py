"""Figure and delimited-output rendering for CLI reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def plot_loss_curves(log: list[dict], out_path: str | Path,
                     keys=("l_total", "l_l2", "l_sem", "l_vq", "l_perceptual")) -> None:
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in keys:
        if key in log[0]:
            ax.plot(steps, [r[key] for r in log], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("tokenizer training losses")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_lm_loss(log: list[dict], out_path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = [r["step"] for r in log]
    ax.plot(steps, [r["loss"] for r in log], label="loss")
    for key in ("loss_understanding", "loss_generation"):
        pts = [(r["step"], r[key]) for r in log if key in r]
        if pts:
            ax.plot(*zip(*pts), label=key, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.legend(fontsize=8)
    ax.set_title("sequence-model training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_reconstruction_grid(originals: torch.Tensor, recons: torch.Tensor,
                             out_path: str | Path, max_images: int = 8) -> None:
    n = min(originals.shape[0], max_images)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4))
    if n == 1:
        axes = axes.reshape(2, 1)
    for i in range(n):
        axes[0, i].imshow(originals[i].numpy())
        axes[1, i].imshow(recons[i].numpy())
        for r in range(2):
            axes[r, i].set_xticks([])
            axes[r, i].set_yticks([])
    axes[0, 0].set_ylabel("original")
    axes[1, 0].set_ylabel("reconstruction")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_code_usage(counts: np.ndarray, out_path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(np.arange(len(counts)), np.sort(counts)[::-1], width=1.0)
    ax.set_xlabel("code (sorted by frequency)")
    ax.set_ylabel("count")
    ax.set_title("codebook usage")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_code_mosaic(patches: list[np.ndarray], code_id: int,
                     out_path: str | Path, cols: int = 8) -> None:
    """Grid of image patches that all quantized to the same code."""
    n = len(patches)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.1 * rows),
                             squeeze=False)
    for k in range(rows * cols):
        ax = axes[k // cols][k % cols]
        ax.set_xticks([])
        ax.set_yticks([])
        if k < n:
            ax.imshow(patches[k])
        else:
            ax.axis("off")
    fig.suptitle(f"code {code_id}: {n} patches")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
