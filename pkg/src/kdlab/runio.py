"""Run configuration documents, artifact hashing, and on-disk formats.

Every artifact embeds the resolved run configuration (no hidden defaults)
plus its sha256 hash so any two artifacts from one run can be matched.
File writes are atomic (write temp, rename).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def resolve_config(**sections) -> dict:
    """Flatten dataclasses/dicts into one JSON-ready document."""
    out = {}
    for name, value in sections.items():
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            out[name] = dataclasses.asdict(value)
        else:
            out[name] = value
    out["config_hash"] = config_hash({k: v for k, v in out.items() if k != "config_hash"})
    return out


def atomic_write(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, doc: dict) -> None:
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())


# --- analysis artifacts ---------------------------------------------------------

_HEATMAP_MAGIC = "#kdlab-heatmap-v1 "


def heatmap_csv(kappa_abs: np.ndarray, actions, meta: dict) -> str:
    """|kappa| grid for one example: rows = positions, columns = actions."""
    lines = [_HEATMAP_MAGIC + json.dumps(meta, sort_keys=True)]
    lines.append("position," + ",".join(f"k{tok}" for tok in actions))
    for t in range(kappa_abs.shape[0]):
        lines.append(f"{t}," + ",".join(f"{v:.17g}" for v in kappa_abs[t]))
    return "\n".join(lines) + "\n"


def read_heatmap_csv(text: str) -> tuple[np.ndarray, dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(_HEATMAP_MAGIC):
        raise ValueError("not a heatmap file")
    meta = json.loads(lines[0][len(_HEATMAP_MAGIC):])
    rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[2:]]
    return np.array(rows), meta


REPORT_COLUMNS = ("domain", "objective", "seed", "lambda", "eb", "rollout_loss",
                  "tf_loss", "rollout_se", "bridge", "garden", "spearman_rho",
                  "mean_ct_bridge", "mean_ct_garden")


def report_rows_csv(rows: list[dict]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)
