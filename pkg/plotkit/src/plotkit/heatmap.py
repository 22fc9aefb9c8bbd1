"""Token-level |kappa| maps: one cell per (position, action)."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import load_heatmap


def build_heatmap_figure(grid: np.ndarray, meta: dict, vmax: float | None = None):
    """Greys colormap, light = near-zero; per-panel scale unless vmax given."""
    T, A = grid.shape
    fig, ax = plt.subplots(figsize=(max(4.0, A * 0.12), max(3.0, T * 0.12)), dpi=110)
    scale = vmax if vmax is not None else (grid.max() or 1.0)
    im = ax.imshow(grid, cmap="Greys", vmin=0.0, vmax=scale,
                   interpolation="nearest", aspect="auto")
    ax.set_xlabel("action")
    ax.set_ylabel("position")
    title = " ".join(str(meta[k]) for k in ("domain", "model") if k in meta)
    if "example" in meta:
        title += f" example {meta['example']}"
    ax.set_title(title.strip() or "token-level |kappa|")
    for pos in meta.get("decision_positions", []):
        ax.axhline(pos - 0.5, color="#d95f02", lw=0.4, alpha=0.6)
        ax.axhline(pos + 0.5, color="#d95f02", lw=0.4, alpha=0.6)
    fig.colorbar(im, ax=ax, label="|kappa|")
    fig.tight_layout()
    return fig


def render_heatmap(csv_path, out_path, vmax: float | None = None) -> None:
    grid, meta = load_heatmap(csv_path)
    fig = build_heatmap_figure(grid, meta, vmax=vmax)
    fig.savefig(out_path)
    plt.close(fig)
