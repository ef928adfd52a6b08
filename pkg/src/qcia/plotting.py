"""PNG figures for experiment reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_matrix(matrix, row_labels: Sequence[str], col_labels: Sequence[str], path, title: str = "",
                xlabel: str = "test class", ylabel: str = "train class", fmt: str = "{:.2f}") -> Path:
    """Heatmap with the value printed in each cell."""
    m = np.asarray(matrix, dtype=float)
    size = max(4.0, 0.45 * max(m.shape) + 2.0)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    im = ax.imshow(m, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), col_labels, rotation=90, fontsize=7)
    ax.set_yticks(range(len(row_labels)), row_labels, fontsize=7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if m.size <= 484:
        hi = np.nanmax(m) if m.size else 0.0
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, fmt.format(m[i, j]), ha="center", va="center", fontsize=5,
                        color="black" if m[i, j] > 0.6 * hi else "white")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_settings(metrics: dict, path, title: str = "", ylabel: str = "metric") -> Path:
    """Bar chart of one value per setting, in the order given."""
    names = list(metrics)
    vals = [float(metrics[k]) for k in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 1.5), 3.5))
    ax.bar(range(len(names)), vals, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05 * max(1.0, max(vals, default=1.0)))
    ax.set_ylabel(ylabel)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history, path, title: str = "") -> Path:
    """Loss and accuracy per epoch from a list of EpochStats (or dicts)."""
    rows = [h.to_json() if hasattr(h, "to_json") else h for h in history]
    ep = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r["loss"] for r in rows], "o-", color="tab:red", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [r["accuracy"] for r in rows], "s-", color="tab:blue", label="accuracy")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_report(report, out_dir, stem: str) -> list[Path]:
    """Figures for an ExperimentReport; returns the written paths."""
    out_dir = Path(out_dir)
    written = []
    tables = report.tables
    if "matrix" in tables:
        tags = tables["classes"]
        written.append(plot_matrix(tables["matrix"], tags, tags, out_dir / f"{stem}_matrix.png",
                                   title=f"{report.config.get('task', '')} cross-quality"))
    if "confusion" in tables:
        labels = tables.get("confusion_labels") or [str(i) for i in range(len(tables["confusion"]))]
        written.append(plot_matrix(tables["confusion"], labels, labels, out_dir / f"{stem}_confusion.png",
                                   xlabel="predicted", ylabel="true", fmt="{:.0f}"))
    if report.name == "mixed_quality_experiment" or any(k.startswith("routed_K") for k in report.metrics):
        keys = [k for k in ("standard", "mixed_trained", "oracle_routed") if k in report.metrics]
        keys += sorted((k for k in report.metrics if k.startswith("routed_K")), key=lambda k: int(k[8:]))
        written.append(plot_settings({k: report.metrics[k] for k in keys}, out_dir / f"{stem}_settings.png",
                                     title=report.config.get("task", "")))
    return written
