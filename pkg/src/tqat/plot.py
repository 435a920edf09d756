"""Overlaid smoothed loss curves (SVG) plus a merged CSV table."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from .trainer import read_metrics, smooth

log = logging.getLogger(__name__)


def _label(path: Path, taken: set) -> str:
    base = path.parent.name if path.stem == "metrics" and path.parent.name else path.stem
    label, i = base, 2
    while label in taken:
        label, i = f"{base}-{i}", i + 1
    taken.add(label)
    return label


def _markers(recs):
    """Phase-in start and transition step of a run, read off its phase tags."""
    out = {}
    phases = [r.phase for r in recs]
    if "full_precision" in phases and phases[-1] != "full_precision":
        first_soft = next((r.step for r in recs if r.phase == "soft"), None)
        first_q = next((r.step for r in recs if r.phase == "quantized"), None)
        if first_soft is not None:
            out["phase-in start"] = first_soft - 1
        if first_q is not None:
            out["t*"] = first_q - 1
    return out


def load_series(paths, window: int = 64) -> dict:
    """label -> {"steps", "raw", "smoothed", "lambda", "markers"}; empty files are skipped with a warning."""
    series, taken = {}, set()
    for p in map(Path, paths):
        recs = read_metrics(p)
        if not recs:
            log.warning("metrics file %s is empty; skipping", p)
            continue
        raw = [r.loss for r in recs]
        series[_label(p, taken)] = {
            "steps": [r.step for r in recs],
            "raw": raw,
            "smoothed": smooth(raw, window),
            "lambda": [r.lam for r in recs],
            "markers": _markers(recs),
        }
    return series


def write_csv(series: dict, path):
    steps = sorted({s for d in series.values() for s in d["steps"]})
    cols = {}
    for label, d in series.items():
        cols[f"{label}:raw"] = dict(zip(d["steps"], d["raw"]))
        cols[f"{label}:smoothed"] = dict(zip(d["steps"], d["smoothed"]))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", *cols])
        for s in steps:
            w.writerow([s, *(repr(c[s]) if s in c else "" for c in cols.values())])


def write_svg(series: dict, path, window: int):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tqat"  # stable element ids, so output is reproducible
    fig, ax = plt.subplots(figsize=(8, 5))
    for label, d in series.items():
        (line,) = ax.plot(d["steps"], d["smoothed"], label=label, linewidth=1.2)
        styles = {"t*": "--", "phase-in start": ":"}
        for name, step in d["markers"].items():
            ax.axvline(step, color=line.get_color(), linestyle=styles[name], linewidth=0.8, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (EMA, window {window})")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_metrics(paths, out_prefix, window: int = 64) -> dict:
    """Write ``<prefix>.svg`` and ``<prefix>.csv``; returns the written paths (empty if nothing to plot)."""
    series = load_series(paths, window)
    if not series:
        return {}
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    svg, table = out_prefix.with_suffix(".svg"), out_prefix.with_suffix(".csv")
    write_csv(series, table)
    write_svg(series, svg, window)
    return {"svg": svg, "csv": table}
