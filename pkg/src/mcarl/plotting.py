"""Matplotlib figures for run metrics and transfer reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def learning_curve(rows, path, key: str = "mean_tracking_reward", label: str | None = None):
    it = [r["iteration"] for r in rows]
    val = [np.nan if r.get(key) is None else r[key] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, val, lw=1.2, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(key.replace("_", " "))
    if label:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def distance_vs_speed(correlations, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in correlations:
        d = [p[1] for p in c.pairs]
        s = [p[2] for p in c.pairs]
        order = np.argsort(d)
        rho = f"{c.rho:.2f}" if c.defined else "undef."
        ax.plot(np.array(d)[order], np.array(s)[order], "o-", ms=4, label=f"{c.variant} s{c.seed} (ρ={rho})")
        for name, x, y in c.pairs:
            ax.annotate(name, (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("morphology distance to training robot")
    ax.set_ylabel("zero-shot forward speed (m/s)")
    ax.grid(alpha=0.3)
    if correlations:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def transfer_heatmap(report, path, metric: str = "speed"):
    summ = report.summary(metric)
    variants, presets = report.variants, report.presets
    grid = np.array([[summ[(v, p)][0] for p in presets] for v in variants], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.4 * len(presets) + 2, 0.5 * len(variants) + 1.5))
    im = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(presets)), presets)
    ax.set_yticks(range(len(variants)), variants)
    for i in range(len(variants)):
        for j in range(len(presets)):
            txt = "n/a" if not np.isfinite(grid[i, j]) else f"{grid[i, j]:.2f}"
            ax.text(j, i, txt, ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label=metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
