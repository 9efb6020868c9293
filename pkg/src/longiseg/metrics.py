"""MS-challenge evaluation metrics.

Conventions for degenerate masks (P = prediction, G = ground truth):

* |P| = 0: PPV = 1 if |G| = 0 else 0
* |G| = 0: DSC = 1 and VD = 0 if |P| = 0, else DSC = 0 and VD = 1
* no ground-truth lesions: LTPR = 1
* no predicted lesions: LFPR = 0

A ground-truth lesion counts as detected when at least one of its voxels is
predicted foreground. Lesions are 26-connected components. VD is clipped
to [0, 1] inside :func:`overall_score` only; the raw value is reported.
Dataset-level numbers are means of per-subject scores.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import label_components

METRIC_NAMES = ("dsc", "ppv", "ltpr", "lfpr", "vd", "overall")
WEIGHTS = {"dsc": 0.125, "ppv": 0.125, "vd": 0.25, "ltpr": 0.25, "lfpr": 0.25}


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label maximal connected foreground regions 1..n; background is 0."""
    mask = np.asarray(getattr(mask, "data", mask))
    if mask.ndim != 3:
        raise ValueError(f"connected_components expects a 3D mask, got shape {mask.shape}")
    return label_components(mask != 0, connectivity)


def _binary(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x)) != 0


def voxel_metrics(pred, gt) -> tuple[float, float, float]:
    """Return (dsc, ppv, vd)."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    n_p, n_g = int(p.sum()), int(g.sum())
    inter = int(np.logical_and(p, g).sum())
    if n_g == 0:
        dsc, vd = (1.0, 0.0) if n_p == 0 else (0.0, 1.0)
    else:
        dsc = 2.0 * inter / (n_p + n_g)
        vd = abs(n_p - n_g) / n_g
    if n_p == 0:
        ppv = 1.0 if n_g == 0 else 0.0
    else:
        ppv = inter / n_p
    return dsc, ppv, vd


def _lesion_counts(p, g, connectivity):
    gt_labels, n_gt = label_components(g, connectivity)
    pred_labels, n_pred = label_components(p, connectivity)
    detected = np.unique(gt_labels[p & (gt_labels > 0)]).size
    hit_pred = np.unique(pred_labels[g & (pred_labels > 0)]).size
    return n_gt, n_pred, int(detected), int(n_pred - hit_pred)


def lesion_metrics(pred, gt, connectivity: int = 26) -> tuple[float, float]:
    """Return (ltpr, lfpr)."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    n_gt, n_pred, detected, false = _lesion_counts(p, g, connectivity)
    ltpr = detected / n_gt if n_gt else 1.0
    lfpr = false / n_pred if n_pred else 0.0
    return ltpr, lfpr


def overall_score(dsc: float, ppv: float, vd: float, ltpr: float, lfpr: float) -> float:
    vd = min(max(vd, 0.0), 1.0)
    return 0.125 * dsc + 0.125 * ppv + 0.25 * (1 - vd) + 0.25 * ltpr + 0.25 * (1 - lfpr)


@dataclass
class MetricReport:
    dsc: float
    ppv: float
    ltpr: float
    lfpr: float
    vd: float
    overall: float
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def evaluate(pred, gt, connectivity: int = 26) -> MetricReport:
    p, g = _binary(pred), _binary(gt)
    dsc, ppv, vd = voxel_metrics(p, g)
    n_gt, n_pred, detected, false = _lesion_counts(p, g, connectivity)
    ltpr = detected / n_gt if n_gt else 1.0
    lfpr = false / n_pred if n_pred else 0.0
    counts = {
        "TP": int(np.logical_and(p, g).sum()),
        "FP": int(np.logical_and(p, ~g).sum()),
        "FN": int(np.logical_and(~p, g).sum()),
        "n_gt_lesions": n_gt,
        "n_pred_lesions": n_pred,
        "n_detected": detected,
        "n_false_lesions": false,
    }
    return MetricReport(dsc, ppv, ltpr, lfpr, vd, overall_score(dsc, ppv, vd, ltpr, lfpr), counts)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Per-subject average of every score; counts are summed."""
    if not reports:
        raise ValueError("mean_report needs at least one report")
    scores = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    counts: dict = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    counts["n_subjects"] = len(reports)
    return MetricReport(counts=counts, **scores)


REPORT_HEADER = ("# metrics averaged per subject; 26-connected lesions; "
                 "detection = >=1 overlapping voxel; VD clipped to 1 in overall only")


def aggregate_csv(per_subject: dict[str, MetricReport]) -> str:
    """CSV text: one row per subject (sorted by id), then mean and std rows."""
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", *METRIC_NAMES])
    ids = sorted(per_subject)
    for sid in ids:
        writer.writerow([sid, *(f"{getattr(per_subject[sid], k):.10g}" for k in METRIC_NAMES)])
    values = np.array([[getattr(per_subject[s], k) for k in METRIC_NAMES] for s in ids])
    writer.writerow(["mean", *(f"{v:.10g}" for v in values.mean(axis=0))])
    writer.writerow(["std", *(f"{v:.10g}" for v in values.std(axis=0))])
    return buf.getvalue()


def report_json(report: MetricReport) -> str:
    return json.dumps(report.as_dict(), indent=2, sort_keys=True)
