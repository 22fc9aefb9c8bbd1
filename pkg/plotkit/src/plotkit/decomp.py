"""Regional decomposition charts: hard/soft/hybrid x bridge/garden/EB bars."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import OBJECTIVES, REGIONS, SchemaError, load_reports

_COLORS = {"hard": "#4477aa", "soft": "#ee6677", "hybrid": "#228833"}


def build_decomposition_figure(docs: list[dict]):
    """One panel per domain; a missing metric gets an explicit gap marker."""
    n = len(docs)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.4), dpi=110, squeeze=False)
    width = 0.25
    xs = np.arange(len(REGIONS))
    for ax, doc in zip(axes[0], docs):
        models = doc["models"]
        for i, name in enumerate(OBJECTIVES):
            offsets = xs + (i - 1) * width
            entry = models.get(name, {})
            for x, region in zip(offsets, REGIONS):
                value = entry.get(region)
                if value is None:
                    ax.bar(x, 0, width, edgecolor=_COLORS[name], fill=False,
                           hatch="///", linewidth=0.8)
                    ax.text(x, 0.0, "n/a", ha="center", va="bottom",
                            fontsize=6, rotation=90, color=_COLORS[name])
                else:
                    ax.bar(x, value, width, color=_COLORS[name],
                           label=name if region == "bridge" else None)
                    ax.text(x, value, f"{value:.3f}", ha="center", va="bottom",
                            fontsize=6, rotation=90)
        ax.set_xticks(xs)
        ax.set_xticklabels([r.upper() if r == "eb" else r.capitalize() for r in REGIONS])
        ax.set_ylabel("contribution / EB (nats)")
        ax.set_title(doc["domain"])
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def render_decomposition(report_path, out_path) -> None:
    docs = load_reports(report_path)
    if not docs:
        raise SchemaError("empty report document")
    fig = build_decomposition_figure(docs)
    fig.savefig(out_path)
    plt.close(fig)
