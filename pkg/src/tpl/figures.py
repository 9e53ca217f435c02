"""Matplotlib rendering for the CLI report paths (PNG next to each CSV)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 130

plt.rcParams.update({
    "figure.figsize": (7.5, 3.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return Path(path)


def save_bias_figure(frequencies, mean_attention, layout, path):
    """Frequency and attention by visual position, plus the retention heat map."""
    positions = np.arange(len(frequencies))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(positions, frequencies, lw=0.8)
    axes[0].set_xlabel("visual position")
    axes[0].set_ylabel("retention frequency")
    if mean_attention is not None:
        axes[1].plot(positions, mean_attention, lw=0.8, color="tab:orange")
    axes[1].set_xlabel("visual position")
    axes[1].set_ylabel("mean attention")
    grid = np.asarray(frequencies).reshape(layout.grid_h, layout.grid_w)
    im = axes[2].imshow(grid, cmap="viridis", vmin=0.0)
    axes[2].set_xlabel("grid column")
    axes[2].set_ylabel("grid row")
    axes[2].grid(False)
    fig.colorbar(im, ax=axes[2], label="retention frequency")
    return _save(fig, path)


def save_cost_figure(labels, flops_ratios, kv_mbytes, path):
    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, 2)
    axes[0].bar(x, flops_ratios, color="tab:blue")
    axes[0].set_xticks(x, labels, rotation=20, ha="right")
    axes[0].set_ylabel("FLOPs ratio vs unpruned")
    axes[1].bar(x, kv_mbytes, color="tab:green")
    axes[1].set_xticks(x, labels, rotation=20, ha="right")
    axes[1].set_ylabel("KV cache (MB) at final tokens")
    return _save(fig, path)


def save_alpha_figure(alphas, overlap_with_importance, overlap_with_uniqueness, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(alphas, overlap_with_importance, marker="o", label="overlap with alpha=1 set")
    ax.plot(alphas, overlap_with_uniqueness, marker="s", label="overlap with alpha=0 set")
    ax.set_xlabel("alpha (importance weight)")
    ax.set_ylabel("retained-set overlap")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _save(fig, path)


def save_latency_figure(labels, medians, p10s, p90s, path):
    x = np.arange(len(labels))
    med = np.asarray(medians)
    err = np.vstack([med - np.asarray(p10s), np.asarray(p90s) - med])
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.bar(x, med, yerr=err, capsize=4, color="tab:purple")
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel("forward latency (s, median with p10/p90)")
    return _save(fig, path)
