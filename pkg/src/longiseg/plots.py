"""Static figures: loss curves, metric bar charts, qualitative overlays."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

GT_COLOR = (0.1, 0.9, 0.1)
PRED_COLOR = (0.95, 0.15, 0.1)


def loss_curve(rows: list[dict], path=None, title: str = ""):
    """Plot every logged loss column against step; returns the figure."""
    if not rows:
        raise ValueError("history is empty")
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_total", "L_seg", "L_sim", "L_smooth"):
        vals = [r.get(key, "") for r in rows]
        if all(v not in ("", None) for v in vals):
            ax.plot(steps, [float(v) for v in vals], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=100)
    return fig


def metrics_bar(results: dict[str, dict], path=None):
    """Grouped bars: one group per method, one bar per metric."""
    if not results:
        raise ValueError("no results to plot")
    names = list(results)
    n_metrics = len(METRIC_NAMES)
    width = 0.8 / n_metrics
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(names), 4))
    x = np.arange(len(names))
    for k, metric in enumerate(METRIC_NAMES):
        ax.bar(x + (k - (n_metrics - 1) / 2) * width, [float(results[n][metric]) for n in names], width,
               label=metric.upper() if metric != "overall" else "Overall")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=100)
    return fig


def contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background (or off-grid)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _gray_rgb(image):
    img = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(img, [1, 99]) if img.size else (0, 1)
    scaled = np.clip((img - lo) / (hi - lo), 0, 1) if hi > lo else np.zeros_like(img)
    return np.repeat(scaled[..., None], 3, axis=-1)


def overlay_panels(image, gt, pred) -> tuple[np.ndarray, np.ndarray]:
    """RGB panels: ground-truth contour and prediction contour over the same slice."""
    base = _gray_rgb(image)
    gt_panel = base.copy()
    gt_panel[contour(gt)] = GT_COLOR
    pred_panel = base.copy()
    pred_panel[contour(pred)] = PRED_COLOR
    return gt_panel, pred_panel


def most_lesioned_axial(gt_volume: np.ndarray) -> int:
    counts = np.asarray(gt_volume).reshape(gt_volume.shape[0], -1).sum(axis=1)
    return int(np.argmax(counts))


def overlay_figure(image, gt, pred, path=None, title: str = ""):
    gt_panel, pred_panel = overlay_panels(image, gt, pred)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, panel, name in zip(axes, (gt_panel, pred_panel), ("ground truth", "prediction")):
        ax.imshow(panel, interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    if path is not None:
        fig.savefig(path, dpi=100)
    return fig
