"""Parsers for the lab's text artifacts."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

HEATMAP_MAGIC = "#kdlab-heatmap-v1 "


class SchemaError(ValueError):
    pass


def load_heatmap(path) -> tuple[np.ndarray, dict]:
    """|kappa| grid (positions x actions) plus its metadata line."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(HEATMAP_MAGIC):
        raise SchemaError(f"{path}: missing heatmap header line")
    try:
        meta = json.loads(lines[0][len(HEATMAP_MAGIC):])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: bad metadata JSON: {exc}") from exc
    header = lines[1].split(",")
    if header[0] != "position" or len(header) < 2:
        raise SchemaError(f"{path}: bad column header")
    n_actions = len(header) - 1
    rows = []
    for ln in lines[2:]:
        parts = ln.split(",")
        if len(parts) != n_actions + 1:
            raise SchemaError(f"{path}: row width {len(parts) - 1} != {n_actions}")
        rows.append([float(v) for v in parts[1:]])
    grid = np.array(rows)
    if grid.size == 0:
        raise SchemaError(f"{path}: empty grid")
    if (grid < 0).any():
        raise SchemaError(f"{path}: |kappa| values must be nonnegative")
    return grid, meta


REGIONS = ("bridge", "garden", "eb")
OBJECTIVES = ("hard", "soft", "hybrid")


def load_reports(path) -> list[dict]:
    """One report document or a list of them (one per domain)."""
    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else [doc]
    for entry in docs:
        if "domain" not in entry or "models" not in entry:
            raise SchemaError(f"{path}: report needs 'domain' and 'models'")
    return docs
