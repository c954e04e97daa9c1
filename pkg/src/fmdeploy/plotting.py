"""Report figures: F1 bars per split, label-efficiency curves and SSL loss curves.

Figures are built on ``matplotlib.figure.Figure`` directly (no pyplot state), and
saved without the software/date metadata so reruns give identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.figure import Figure

from fmdeploy.metrics import EvaluationReport

_COLORS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3")
_PNG_META = {"Software": None}


def _new_figure(width: float = 6.0, height: float = 4.0) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=100)
    ax = fig.add_subplot(1, 1, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.set_axisbelow(True)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    return fig, ax


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def plot_f1_bars(report: EvaluationReport, path: str | Path) -> Path:
    """Grouped bars: one group per split, one bar per model."""
    splits = list(report.splits)
    models = report.model_names()
    fig, ax = _new_figure(max(5.0, 1.6 * len(splits) + 2.0), 4.0)
    width = 0.8 / max(len(models), 1)
    x = np.arange(len(splits))
    for i, m in enumerate(models):
        vals = []
        for s in splits:
            res = report.splits[s].models.get(m)
            vals.append(np.nan if res is None or res.overall is None else res.overall)
        ax.bar(x + (i - (len(models) - 1) / 2) * width, vals, width, label=m, color=_COLORS[i % len(_COLORS)])
    ax.set_xticks(x)
    ax.set_xticklabels([s.capitalize() for s in splits])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("Crop F1" if report.task == "cropland_binary" else "Macro F1")
    ax.set_title(report.title or report.task)
    ax.legend(fontsize=8, frameon=False, loc="lower right")
    return _save(fig, path)


def plot_label_efficiency(points: Sequence[Mapping], path: str | Path, title: str = "") -> Path:
    """Regional F1 against the fraction of regional samples injected into training."""
    fig, ax = _new_figure()
    f = [p["fraction"] for p in points]
    v = [np.nan if p["regional_f1"] is None else p["regional_f1"] for p in points]
    ax.plot(f, v, marker="o", color=_COLORS[0])
    for p in points:
        if p["regional_f1"] is not None:
            ax.annotate(str(p["n_injected"]), (p["fraction"], p["regional_f1"]), textcoords="offset points", xytext=(0, 6), ha="center", fontsize=7)
    ax.set_xlabel("fraction of regional pool added to training")
    ax.set_ylabel("regional F1")
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    return _save(fig, path)


def plot_loss_curve(curve: Sequence[Mapping], path: str | Path, title: str = "SSL probe loss") -> Path:
    fig, ax = _new_figure()
    ax.plot([r["epoch"] for r in curve], [r["loss"] for r in curve], marker="o", color=_COLORS[1])
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked reconstruction MSE")
    ax.set_title(title)
    return _save(fig, path)
