"""Matplotlib figures for the CLI reports."""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from skimage.segmentation import find_boundaries  # noqa: E402

CLASS_COLOURS = ["#000000", "#ff0000", "#22dd22", "#3366ff", "#ffcc00", "#ff8800", "#aa00ff", "#00cccc"]


def overlay_array(rgb: np.ndarray, instances: np.ndarray, type_map: Optional[np.ndarray] = None) -> np.ndarray:
    """RGB copy with instance boundaries drawn in their class colour (white when untyped)."""
    out = rgb.copy()
    edges = find_boundaries(instances, mode="inner")
    if type_map is None:
        out[edges] = (255, 255, 255)
        return out
    for c in np.unique(type_map[edges]):
        colour = matplotlib.colors.to_rgb(CLASS_COLOURS[int(c) % len(CLASS_COLOURS)]) if c else (1, 1, 1)
        out[edges & (type_map == c)] = (np.array(colour) * 255).astype(np.uint8)
    return out


def overlay_figure(rgb, instances, type_map=None, class_names: Optional[Sequence[str]] = None, path=None,
                   title: str = ""):
    fig, ax = plt.subplots(figsize=(6, 6 * rgb.shape[0] / rgb.shape[1]), dpi=120)
    ax.imshow(overlay_array(rgb, instances, type_map))
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    if class_names is not None and type_map is not None:
        present = sorted(int(c) for c in np.unique(type_map) if c)
        handles = [matplotlib.patches.Patch(color=CLASS_COLOURS[c % len(CLASS_COLOURS)], label=class_names[c])
                   for c in present if c < len(class_names)]
        if handles:
            ax.legend(handles=handles, loc="lower right", fontsize=7, framealpha=0.8)
    fig.tight_layout()
    if path:
        fig.savefig(path)
        plt.close(fig)
    return fig


def tissue_figure(per_tissue: Dict[str, Dict[str, float]], path):
    names = sorted(per_tissue)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 3.5), dpi=120)
    ax.bar(x - 0.2, [per_tissue[n]["mPQ"] for n in names], 0.4, label="mPQ")
    ax.bar(x + 0.2, [per_tissue[n]["bPQ"] for n in names], 0.4, label="bPQ")
    ax.set_xticks(x, names, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def complexity_figure(rows: Sequence[Dict[str, float]], size: int, path):
    """Bar chart of GFLOPs and parameters for each row of ``ComplexityReport.as_records()``."""
    names = [r["name"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), dpi=120)
    axes[0].bar(names, [r.get(f"gflops@{size}", np.nan) for r in rows], color="#4c72b0")
    axes[0].set_ylabel(f"GFLOPs @ {size}px")
    axes[1].bar(names, [r["params_millions"] for r in rows], color="#dd8452")
    axes[1].set_ylabel("parameters (M)")
    for ax in axes:
        ax.set_yscale("log")
        ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_figure(epoch_losses: Sequence[float], path):
    fig, ax = plt.subplots(figsize=(4, 3), dpi=120)
    ax.plot(range(len(epoch_losses)), epoch_losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
