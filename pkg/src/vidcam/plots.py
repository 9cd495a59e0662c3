"""Matplotlib figures written next to the CSV/JSON report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so identical data gives identical bytes
_PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
})


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def confusion_figure(matrix, labels, title, path):
    m = np.asarray(matrix, dtype=float)
    n = len(labels)
    side = max(3.5, 0.28 * n + 1.5)
    fig, ax = plt.subplots(figsize=(side, side * 0.9))
    im = ax.imshow(m, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_xticks(range(n), labels, rotation=90)
    ax.set_yticks(range(n), labels)
    ax.set_xlabel("predicted device")
    ax.set_ylabel("true device")
    ax.set_title(title)
    if n <= 12:
        for i in range(n):
            for j in range(n):
                if m[i, j] > 0:
                    ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                            color="black" if m[i, j] > 0.5 else "white")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def slice_accuracy_figure(accuracy: dict, path):
    keys = [k for k in accuracy if "/" not in k]
    vals = [accuracy[k] for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(keys) + 1), 3))
    ax.bar(range(len(keys)), vals, color="0.4")
    ax.set_xticks(range(len(keys)), [k.split("=")[-1] for k in keys], rotation=30)
    ax.set_ylim(0, 1)
    ax.set_ylabel("video accuracy")
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def training_curve_figure(history, path):
    """``history``: iterable of EpochRecord-like objects (epoch, mean_loss, video_accuracy)."""
    history = list(history)
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(epochs, [h.mean_loss for h in history], "-o", color="0.2", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    acc = [h.video_accuracy for h in history]
    if any(a is not None for a in acc):
        ax2 = ax.twinx()
        ax2.plot(epochs, [np.nan if a is None else a for a in acc], "-s", color="tab:red", ms=3,
                 label="test video accuracy")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("test video accuracy")
    fig.tight_layout()
    return _save(fig, path)
