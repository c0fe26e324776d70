"""Figure rendering for the report files.

Every figure duplicates a delimited report; the CSV/text artifacts stay
canonical and carry the numbers, these are the human-friendly views written
next to them. Rendering is headless (Agg) and always goes to a file.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .fusion import EvalReport, HistoryRecord

_DPI = 120


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def plot_history(records: list[HistoryRecord], path: str) -> str:
    """Loss and top-1 curves per split across epochs."""
    if not records:
        raise ValidationError("history is empty")
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in ("train", "test"):
        rows = [r for r in records if r.split == split]
        if not rows:
            continue
        epochs = [r.epoch for r in rows]
        ax_loss.plot(epochs, [r.loss for r in rows], marker="o", label=split)
        ax_acc.plot(epochs, [r.top1 for r in rows], marker="o", label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1")
    ax_loss.legend()
    ax_acc.legend()
    return _save(fig, path)


def plot_per_class(report: EvalReport, path: str) -> str:
    """Moving-average per-class accuracy by branch, head classes first,
    with the training counts on a log twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(report.class_order))
    for label, branch in (("base", report.base), ("ret", report.ret),
                          ("fused", report.fused)):
        if branch is not None:
            ax.plot(x, branch.moving_avg, label=label)
    ax.set_xlabel("classes by descending training count")
    ax.set_ylabel("top-1 (moving average)")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="upper right")
    twin = ax.twinx()
    twin.plot(x, report.class_counts[report.class_order], color="gray",
              alpha=0.4, linestyle="--")
    twin.set_yscale("log")
    twin.set_ylabel("training count")
    return _save(fig, path)


def plot_table(header: list[str], rows: list[list], path: str,
               x_column: str | None = None) -> str:
    """Line chart of each numeric column against the x column (first numeric
    column by default); used for the sweep and ablation tables."""
    if not rows:
        raise ValidationError("table is empty")
    columns = list(zip(*rows))
    numeric = [i for i, col in enumerate(columns)
               if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in col)]
    if x_column is not None:
        if x_column not in header:
            raise ValidationError(f"no column named {x_column!r}")
        xi = header.index(x_column)
    else:
        if not numeric:
            raise ValidationError("no numeric column to plot against")
        xi = numeric[0]
    x = np.asarray(columns[xi], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in numeric:
        if i == xi:
            continue
        ax.plot(x, np.asarray(columns[i], dtype=np.float64), marker="o",
                label=header[i])
    ax.set_xlabel(header[xi])
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_bench(rows: list[dict], path: str) -> str:
    """Mean query latency per benchmarked index."""
    if not rows:
        raise ValidationError("nothing benchmarked")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [r["label"] for r in rows]
    ax.bar(labels, [r["mean_query_seconds"] * 1e3 for r in rows], color="#4878d0")
    ax.set_ylabel("mean query (ms)")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)


def plot_inspection(records: list[dict], path: str, max_panels: int = 4) -> str:
    """Distance histograms for the first few inspected queries."""
    if not records:
        raise ValidationError("nothing to inspect")
    n = min(max_panels, len(records))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3), squeeze=False)
    for ax, rec in zip(axes[0], records[:n]):
        edges = np.asarray(rec["hist_edges"])
        ax.stairs(rec["hist_counts"], edges, fill=True, color="#4878d0")
        matches = sum(1 for r in rec["retrieved"] if r["exact_match"])
        ax.set_title(f"query {rec['query_id']}: {matches}/{len(rec['retrieved'])} match",
                     fontsize=9)
        ax.set_xlabel("distance")
    return _save(fig, path)
