"""Figures written next to the JSON/CSV reports.

All functions render with the non-interactive Agg backend and return the
path of the PNG they wrote.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_COLORS = {"D00": "tab:blue", "D10": "tab:orange", "D20": "tab:green", "D40": "tab:red"}
DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def damage_distribution(report: dict, path) -> Path:
    """Grouped bar chart of box counts per damage class, one group per folder."""
    folders = list(report["folders"])
    classes = list(CLASS_COLORS)
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(folders) + 2), 3.5))
    x = np.arange(len(folders))
    width = 0.8 / len(classes)
    for k, c in enumerate(classes):
        counts = [report["folders"][f]["boxes"][c] for f in folders]
        bars = ax.bar(x + (k - 1.5) * width, counts, width, label=c, color=CLASS_COLORS[c])
        ax.bar_label(bars, fontsize=7)
    ax.set_xticks(x, folders, rotation=20)
    ax.set_ylabel("boxes")
    ax.legend(frameon=False, ncols=4, loc="upper center", bbox_to_anchor=(0.5, 1.15))
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def usable_images(report: dict, path) -> Path:
    folders = list(report["folders"])
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(folders) + 2), 3.2))
    x = np.arange(len(folders))
    ax.bar(x - 0.2, [report["folders"][f]["images"] for f in folders], 0.4, label="images", color="0.6")
    ax.bar(x + 0.2, [report["folders"][f]["usable"] for f in folders], 0.4, label="usable", color="tab:blue")
    ax.set_xticks(x, folders, rotation=20)
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def pr_curves(curves: dict, path, title: str = "") -> Path:
    """``curves`` maps class code to a :class:`~rdd.evalmetrics.PRCurve`."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for code, c in curves.items():
        if len(c.recall) == 0:
            continue
        ax.step(c.recall, c.envelope, where="post", color=CLASS_COLORS.get(code), label=f"{code} AP={c.ap:.3f}")
        ax.plot(c.recall, c.precision, ".", ms=2, color=CLASS_COLORS.get(code), alpha=0.4)
    ax.set(xlim=(0, 1.02), ylim=(0, 1.02), xlabel="recall", ylabel="precision", title=title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def augment_grid(samples, path, names=("D00", "D10", "D20", "D40"), cols: int = 4) -> Path:
    """Tile augmented samples with their boxes drawn on top."""
    n = len(samples)
    cols = min(cols, n)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, s in zip(axes.ravel(), samples):
        ax.imshow(s.image[:, :, ::-1])
        for (x0, y0, x1, y1), c in zip(s.boxes, s.classes):
            code = names[int(c)] if 0 <= int(c) < len(names) else str(c)
            ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=1, ec=CLASS_COLORS.get(code, "w")))
            ax.text(x0, y0, code, fontsize=6, color="w", va="bottom",
                    bbox={"fc": CLASS_COLORS.get(code, "k"), "pad": 0.5, "lw": 0})
        ax.set_title(" + ".join(s.provenance.get("ops", [])), fontsize=6)
    fig.tight_layout()
    return _save(fig, path)
