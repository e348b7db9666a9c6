"""Run artifacts for human inspection: lossless 8-bit image grids,
matplotlib figures (contact sheets, loss curves, metric bars), and
tab-delimited metric records.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def _to_grid(images: np.ndarray, ncols: int | None = None) -> np.ndarray:
    """Tile an (N, C, H, W) batch into one (H', W', C) uint8 array."""
    n, c, h, w = images.shape
    ncols = ncols or math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    grid = np.zeros((nrows * h, ncols * w, c))
    for i in range(n):
        r, col = divmod(i, ncols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = images[i].transpose(1, 2, 0)
    return (np.clip(grid, 0, 1) * 255).round().astype(np.uint8)


def save_image_grid(images: np.ndarray, path: str, ncols: int | None = None) -> None:
    """Write a batch as one losslessly compressed 8-bit PNG contact sheet."""
    grid = _to_grid(np.asarray(images), ncols)
    if grid.shape[-1] == 1:
        img = Image.fromarray(grid[:, :, 0], mode="L")
    else:
        img = Image.fromarray(grid, mode="RGB")
    img.save(path, format="PNG")


def save_contact_sheet(images: np.ndarray, path: str, title: str = "") -> None:
    """Matplotlib contact sheet with a title, for report directories."""
    grid = _to_grid(np.asarray(images))
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(grid.squeeze(-1) if grid.shape[-1] == 1 else grid, cmap="gray")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_loss_curves(record, path: str) -> None:
    """Per-term loss trajectories over sampling steps."""
    steps = [e.step for e in record.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [e.total for e in record.steps], label="total", lw=1.2)
    for name in ("cls", "div", "dist"):
        vals = [getattr(e, name) for e in record.steps]
        if any(v is not None for v in vals):
            ax.plot(steps, vals, label=name, lw=0.8, alpha=0.8)
    bound = 0
    for res, count in record.config.stages[:-1]:
        bound += count
        ax.axvline(bound, color="gray", ls="--", lw=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars(values: dict, path: str, title: str = "") -> None:
    """Bar chart of named metric values."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(values)
    ax.bar(names, [values[k] for k in names], color="steelblue")
    ax.set_ylabel("value")
    if title:
        ax.set_title(title)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_delimited(path: str, header, rows, sep: str = "\t") -> None:
    """Structured text records: one header line, one row per record."""
    with open(path, "w") as f:
        f.write(sep.join(str(h) for h in header) + "\n")
        for row in rows:
            f.write(sep.join(str(v) for v in row) + "\n")
