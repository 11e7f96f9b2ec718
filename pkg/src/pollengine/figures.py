"""Chart rendering for reports, evaluations and training traces.

Everything draws through the Agg backend and writes straight to files;
nothing here opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InputError
from .pipeline import PalynologyReport, class_color


def _mpl_color(rgb) -> tuple:
    return tuple(c / 255.0 for c in rgb)


def composition_figure(report: PalynologyReport, path) -> Path:
    """Bar chart of grain counts per class, annotated with percentages."""
    path = Path(path)
    names = sorted(report.counts)
    counts = [report.counts[n] for n in names]
    colors = [_mpl_color(class_color(n)) for n in names]
    labels = [f"{report.percentages[n]:.1f}%" for n in names]
    if report.unclassified:
        names.append("(unclassified)")
        counts.append(report.unclassified)
        colors.append((0.85, 0.85, 0.85))
        labels.append("")
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.5))
    if names:
        bars = ax.bar(range(len(names)), counts, color=colors)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        for bar, text in zip(bars, labels):
            ax.annotate(text, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=8)
    else:
        ax.text(0.5, 0.5, "no grains", ha="center", va="center", transform=ax.transAxes)
    ax.set_ylabel("grains")
    ax.set_title(f"{report.image_name}: {report.total_grains} grains")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def confusion_figure(classes, confusion, path) -> Path:
    """Row-normalized confusion matrix with raw counts printed in the cells."""
    path = Path(path)
    conf = np.asarray(confusion, dtype=np.float64)
    classes = [str(c) for c in classes]
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or conf.shape[0] != len(classes):
        raise InputError(f"need a square matrix matching {len(classes)} classes, got {conf.shape}")
    rows = conf.sum(axis=1, keepdims=True)
    shade = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    side = max(3.5, 0.6 * len(classes) + 1.5)
    fig, ax = plt.subplots(figsize=(side, side))
    im = ax.imshow(shade, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(classes)))
    ax.set_yticks(range(len(classes)))
    ax.set_xticklabels(classes, rotation=45, ha="right")
    ax.set_yticklabels(classes)
    for i in range(len(classes)):
        for j in range(len(classes)):
            ax.text(j, i, str(int(conf[i, j])), ha="center", va="center",
                    color="white" if shade[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def recall_figure(recall_at_k: dict, path) -> Path:
    """Recall@K curve over the evaluated K values."""
    path = Path(path)
    if not recall_at_k:
        raise InputError("recall_at_k is empty")
    ks = sorted(recall_at_k)
    vals = [recall_at_k[k] for k in ks]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(ks, vals, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("K")
    ax.set_ylabel("recall@K")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def trace_figure(trace, path) -> Path:
    """Loss curve of a toy optimization run, with the separability ratio
    on a second axis when it was defined."""
    path = Path(path)
    if not trace:
        raise InputError("trace is empty")
    steps = np.arange(1, len(trace) + 1)
    losses = [loss for loss, _ in trace]
    rhos = [rho for _, rho in trace]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(steps, losses, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    if not all(math.isnan(r) for r in rhos):
        ax2 = ax.twinx()
        finite = [r if math.isfinite(r) else math.nan for r in rhos]
        ax2.plot(steps, finite, color="tab:orange", label="rho")
        ax2.set_ylabel("inter/intra distance ratio", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
