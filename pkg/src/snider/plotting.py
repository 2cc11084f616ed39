"""Report figures written next to the CSV outputs.

All functions render with the non-interactive Agg backend and return the
path they wrote.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_SERIES = ("l_gd", "l_gr", "l_ds", "l_dc", "total")


def _to_hwc(image: np.ndarray) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    return img


def read_metrics(path) -> dict[str, list]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[str, list] = {"iter": [int(r["iter"]) for r in rows], "stage": [r["stage"] for r in rows]}
    for key in LOSS_SERIES + ("lr", "grad_norm"):
        out[key] = [float(r[key]) for r in rows]
    return out


def plot_loss_curves(metrics_csv, out_path=None) -> Path:
    """Per-term and total loss against iteration (log scale), with stage boundaries marked."""
    metrics_csv = Path(metrics_csv)
    out_path = Path(out_path) if out_path is not None else metrics_csv.with_name("loss_curves.png")
    m = read_metrics(metrics_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    its = np.asarray(m["iter"])
    for key in LOSS_SERIES:
        vals = np.asarray(m[key])
        if vals.size and np.any(vals > 0):
            ax.plot(its, np.maximum(vals, 1e-12), label=key, lw=1.5 if key == "total" else 1.0)
    prev = None
    for it, st in zip(m["iter"], m["stage"]):
        if prev is not None and st != prev:
            ax.axvline(it, color="grey", ls=":", lw=0.8)
            ax.text(it, 1.0, f" {st}", transform=ax.get_xaxis_transform(), va="top", fontsize=7, color="grey")
        prev = st
    if its.size:
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_recoveries(
    lq: Sequence[np.ndarray],
    recovered: Sequence[np.ndarray],
    clean: Sequence[np.ndarray],
    out_path,
    titles: Sequence[str] | None = None,
    max_items: int = 6,
) -> Path:
    """Grid with one column per sample: degraded input, recovery, clean reference."""
    n = min(max_items, len(lq))
    out_path = Path(out_path)
    fig, axes = plt.subplots(3, max(n, 1), figsize=(1.6 * max(n, 1), 5), squeeze=False)
    for row, (label, images) in enumerate((("input", lq), ("recovered", recovered), ("clean", clean))):
        for col in range(max(n, 1)):
            ax = axes[row, col]
            ax.set_xticks([])
            ax.set_yticks([])
            if col < n:
                ax.imshow(_to_hwc(images[col]), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                if row == 0 and titles is not None:
                    ax.set_title(titles[col], fontsize=7)
            if col == 0:
                ax.set_ylabel(label, fontsize=8)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_eval_summary(summary: dict, out_path) -> Path:
    """Accuracy and mean PSNR before and after recovery, side by side."""
    out_path = Path(out_path)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(6, 3))
    labels = ("input", "recovered")
    a1.bar(labels, [summary["accuracy_lq"], summary["accuracy_recovered"]], color=("#999999", "#3366aa"))
    a1.set_ylim(0, 1)
    a1.set_title("full-plate accuracy", fontsize=9)
    a2.bar(labels, [summary["mean_psnr_lq"], summary["mean_psnr_recovered"]], color=("#999999", "#3366aa"))
    a2.set_title("mean PSNR (dB)", fontsize=9)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
