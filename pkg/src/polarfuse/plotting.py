"""File-only figures for the CLI report paths: AP bars, loss curves, BEV previews."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import Scene  # noqa: E402

ADDED_COLOR = "#ff40ff"  # magenta, matches the PLY export
RAW_COLOR = "black"

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def golden_size(width: float = 5.0) -> tuple:
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date chunks, so reruns produce identical bytes
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def ap_bars(per_class: Mapping[str, float], path, title: str = "AP@R40 per class",
            overall: Optional[float] = None) -> Path:
    """Bar chart of per-class AP, with an extra bar for the class mean when given."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size(4.5))
        names = list(per_class)
        vals = [100.0 * per_class[c] for c in names]
        if overall is not None:
            names.append("Overall")
            vals.append(100.0 * overall)
        colors = ["0.55"] * len(per_class) + (["#3465a4"] if overall is not None else [])
        bars = ax.bar(names, vals, color=colors)
        for b, v in zip(bars, vals):
            ax.annotate(f"{v:.1f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom",
                        fontsize=8, xytext=(0, 2), textcoords="offset points")
        ax.set_ylim(0, 105)
        ax.set_ylabel("AP (%)")
        ax.set_title(title)
        return _save(fig, path)


def loss_curves(runs: Mapping[str, Sequence[dict]], path, title: str = "Training losses") -> Path:
    """One panel per quantity (L_det, L_sim, mAP); one line per labelled run."""
    keys = ["L_det", "L_sim", "mAP"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for label, rows in runs.items():
            epochs = [r["epoch"] for r in rows]
            for ax, key in zip(axes, keys):
                vals = np.array([np.nan if r.get(key) is None else r[key] for r in rows], dtype=float)
                if np.all(np.isnan(vals)):
                    continue
                ax.plot(epochs, vals, marker="o" if key == "mAP" else None, ms=3, label=label)
        for ax, key in zip(axes, keys):
            ax.set_xlabel("epoch")
            ax.set_title(key)
        if any(ax.lines for ax in axes):
            axes[0].legend(frameon=False)
        fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def bev_preview(scene: Scene, path, extent: Optional[tuple] = None, title: Optional[str] = None) -> Path:
    """Top-down scatter: raw points black, added points magenta, boxes outlined."""
    raw = scene.raw_points()
    added = scene.added_points()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(raw[:, 0], raw[:, 1], s=0.3, c=RAW_COLOR, linewidths=0, label=f"raw ({len(raw)})")
        if len(added):
            ax.scatter(added[:, 0], added[:, 1], s=0.3, c=ADDED_COLOR, linewidths=0,
                       label=f"added ({len(added)})")
        for box in scene.boxes:
            c = box.corners_bev()
            ring = np.vstack([c, c[:1]])
            ax.plot(ring[:, 0], ring[:, 1], lw=0.7, color="#3465a4")
        if extent is not None:
            ax.set_xlim(*extent[0])
            ax.set_ylim(*extent[1])
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.legend(loc="upper right", markerscale=15, frameon=False)
        ax.set_title(title or f"frame {scene.frame_id}")
        return _save(fig, path)


def grid_table(results: Mapping[str, Dict[str, float]], path, title: str = "Fusion x supervision") -> Path:
    """Grouped bars of mAP: one group per fusion kind, one bar per supervision setting."""
    kinds = list(results)
    settings = sorted({s for r in results.values() for s in r})
    width = 0.8 / max(len(settings), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size(4.5))
        x = np.arange(len(kinds))
        for k, s in enumerate(settings):
            vals = [100.0 * results[kind].get(s, np.nan) for kind in kinds]
            ax.bar(x + (k - (len(settings) - 1) / 2) * width, vals, width, label=s)
        ax.set_xticks(x, kinds)
        ax.set_ylabel("overall mAP@R40 (%)")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
