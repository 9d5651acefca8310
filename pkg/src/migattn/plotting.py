"""Matplotlib report figures rendered next to the raster/TSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

import numpy as np  # noqa: E402

from .rasters import BACKGROUND, PALETTE  # noqa: E402
from .scene import Scene, TokenSequence, segment_name  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 6,
    "ytick.labelsize": 6,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "migattn",
}

# no Software tag, so the PNG bytes only depend on the pixels
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def _segment_ticks(ax, sequence: TokenSequence):
    bounds = [s for s in sequence.starts[1:]]
    for b in bounds:
        ax.axhline(b - 0.5, color="tab:red", lw=0.4)
        ax.axvline(b - 0.5, color="tab:red", lw=0.4)
    centers = [s + n / 2 - 0.5 for s, n in zip(sequence.starts, sequence.lengths)]
    names = [segment_name(c) for c in range(len(sequence.lengths))]
    ax.set_xticks(centers, names, rotation=90)
    ax.set_yticks(centers, names)


def plot_masks(path: str | Path, masks: dict[str, np.ndarray], sequence: TokenSequence) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(masks), figsize=(4 * len(masks), 4.2), squeeze=False)
        for ax, (name, mask) in zip(axes[0], masks.items()):
            ax.imshow(mask, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            _segment_ticks(ax, sequence)
            ax.set_title(f"{name} mask ({mask.mean():.3f} dense)")
            ax.set_xlabel("key")
            ax.set_ylabel("query")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_composite(path: str | Path, scene: Scene, ownership: np.ndarray, order, occlusion: dict[int, float]) -> Path:
    colors = [np.array(BACKGROUND) / 255] + [np.array(PALETTE[(i - 1) % len(PALETTE)]) / 255 for i in range(1, scene.n_instances + 1)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5 * scene.canvas_h / scene.canvas_w + 0.6))
        ax.imshow(ownership, cmap=ListedColormap(colors), vmin=-0.5, vmax=scene.n_instances + 0.5, interpolation="nearest")
        for inst in scene.instances:
            b = inst.bbox
            ax.add_patch(Rectangle((b.x - 0.5, b.y - 0.5), b.w, b.h, fill=False, lw=1.0, ls="--", ec="black"))
            ax.text(b.x, b.y, f"{inst.id}: occ {occlusion[inst.id]:.2f}", fontsize=6, va="top")
        ax.set_title("draw order (bottom to top): " + " < ".join(map(str, order)))
        ax.set_xlabel("i")
        ax.set_ylabel("j")
        fig.tight_layout()
        return _save(fig, Path(path))
