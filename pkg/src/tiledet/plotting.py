"""Matplotlib figures for evaluation reports. Always renders off-screen."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

from .evaluator import EvalReport  # noqa: E402

# PNG metadata otherwise embeds the library version string
_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)


def plot_confusion(report: EvalReport, path: str | Path, top_k: int | None = 10):
    """Heatmap of the confusion counts.

    A red guide separates the ``top_k`` most abundant classes from the rest.
    """
    m = report.confusion.astype(float)
    labels = report.confusion_labels
    n = len(labels)
    size = max(4.0, 0.32 * n + 2.0)
    fig, ax = plt.subplots(figsize=(size, size))
    shown = np.where(m > 0, m, np.nan)
    vmax = np.nanmax(shown) if np.isfinite(shown).any() else 1.0
    im = ax.imshow(shown, cmap="viridis", norm=LogNorm(vmin=1.0, vmax=max(vmax, 1.0)))
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if top_k and n - 2 > top_k:
        edge = top_k - 0.5
        ax.axhline(edge, color="red", lw=1.2)
        ax.axvline(edge, color="red", lw=1.2)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="count")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_per_class_ap(report: EvalReport, path: str | Path):
    rows = [r for r in report.per_class if r.ap_50 is not None]
    rows.sort(key=lambda r: (-r.n_gt, r.category_id))
    names = [r.name for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.35 * len(rows) + 2.0), 3.6))
    ax.bar(x - 0.2, [r.ap_50 for r in rows], width=0.4, label="AP@0.5", color="#4c72b0")
    ax.bar(x + 0.2, [r.ap_50_95 or 0.0 for r in rows], width=0.4, label="AP@0.5:0.95", color="#dd8452")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("average precision")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_headline(reports: dict[str, EvalReport], path: str | Path):
    """Grouped bars of the headline mAP columns, one group per class set."""
    cols = ["map_50_95", "map_50", "map_50_small", "map_50_medium", "map_50_large"]
    titles = ["@0.5:0.95", "@0.5", "small", "medium", "large"]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(cols))
    for k, (name, rep) in enumerate(reports.items()):
        vals = [getattr(rep, c) or 0.0 for c in cols]
        ax.bar(x + (k - (len(reports) - 1) / 2) * width, vals, width=width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(titles)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mAP")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
