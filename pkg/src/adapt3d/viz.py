"""Rendering helpers: binary PGM output, attention-map upsampling, and the
matplotlib figures written next to the delimited training/report outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .slicer import VIEW_NAMES


def minmax_u8(arr):
    """Min-max normalize to [0, 255]; a constant input maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    """Binary P5 with maxval 255."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-d uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    at = 0
    fields = []
    while len(fields) < 4:  # magic, width, height, maxval
        while at < len(blob) and blob[at : at + 1].isspace():
            at += 1
        start = at
        while at < len(blob) and not blob[at : at + 1].isspace():
            at += 1
        fields.append(blob[start:at])
    at += 1  # single whitespace after maxval; payload may hold any byte
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path} is not a maxval-255 P5 file")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(blob[at : at + w * h], dtype=np.uint8).reshape(h, w)


def bilinear_upsample(grid, extent):
    """Corner-aligned bilinear upsampling of a small 2D grid to extent^2."""
    grid = np.asarray(grid, dtype=np.float64)
    out = grid
    for axis in range(2):
        old = out.shape[axis]
        if old == extent:
            continue
        if old == 1:
            out = np.repeat(out, extent, axis=axis)
            continue
        pos = np.linspace(0.0, old - 1, extent)
        lo = np.clip(np.floor(pos).astype(int), 0, old - 2)
        t = (pos - lo).reshape((extent, 1) if axis == 0 else (1, extent))
        out = np.take(out, lo, axis=axis) + t * (
            np.take(out, lo + 1, axis=axis) - np.take(out, lo, axis=axis)
        )
    return out


def save_training_figure(metrics, path):
    """Loss/accuracy curves plus the slice-allocation trace."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_loss, ax_alloc) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [m.train_loss for m in metrics], "o-", label="train loss")
    ax_loss.set_ylabel("train loss")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(
        epochs, [m.val_acc for m in metrics], "s--", color="tab:green", label="val acc"
    )
    ax_acc.set_ylabel("val accuracy")
    ax_acc.set_ylim(0, 1.05)
    lines1, labels1 = ax_loss.get_legend_handles_labels()
    lines2, labels2 = ax_acc.get_legend_handles_labels()
    ax_loss.legend(lines1 + lines2, labels1 + labels2, loc="center right")

    for view in range(3):
        ax_alloc.plot(epochs, [m.counts[view] for m in metrics], "o-", label=VIEW_NAMES[view])
    ax_alloc.set_xlabel("epoch")
    ax_alloc.set_ylabel("slices per view")
    ax_alloc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_panel(maps, slices, stages, path):
    """Grid figure: one row per view (slice + per-stage attention maps)."""
    rows = len(VIEW_NAMES)
    cols = 1 + len(stages)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    for view in range(rows):
        axes[view][0].imshow(slices[view], cmap="gray")
        axes[view][0].set_ylabel(VIEW_NAMES[view])
        if view == 0:
            axes[view][0].set_title("slice")
        for j, stage in enumerate(stages, start=1):
            axes[view][j].imshow(maps[(view, stage)], cmap="inferno")
            if view == 0:
                axes[view][j].set_title(stage)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
