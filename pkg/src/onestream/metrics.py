"""One-pass evaluation: Success (3D IoU AUC) and Precision (center-distance AUC).

Threshold grids follow the one-pass-evaluation convention: 101 IoU
thresholds on [0, 1] and 101 distance thresholds on [0, 2 m]. Inequalities
are pinned to IoU > tau and distance < delta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 101)
DIST_THRESHOLDS = np.linspace(0.0, 2.0, 101)


def success_auc(ious):
    """Mean over tau in {0, .01, ..., 1} of the fraction with IoU > tau, x100."""
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise ValueError("success_auc: empty IoU list")
    passed = ious[:, None] > IOU_THRESHOLDS[None, :]
    return float(passed.mean() * 100.0)


def precision_auc(dists):
    """Mean over delta in {0, .02, ..., 2} of the fraction with dist < delta, x100."""
    dists = np.asarray(dists, dtype=float)
    if dists.size == 0:
        raise ValueError("precision_auc: empty distance list")
    passed = dists[:, None] < DIST_THRESHOLDS[None, :]
    return float(passed.mean() * 100.0)


@dataclass
class MetricReport:
    success: float
    precision: float
    ious: list
    dists: list
    frame_count: int
    bins: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "success": self.success,
            "precision": self.precision,
            "frame_count": self.frame_count,
        }
        if self.bins:
            out["sparsity_bins"] = {
                name: {"success": r.success, "precision": r.precision,
                       "frame_count": r.frame_count}
                for name, r in self.bins.items()
            }
        return out


def report(ious, dists):
    ious = list(map(float, ious))
    dists = list(map(float, dists))
    if len(ious) != len(dists):
        raise ValueError(f"report: {len(ious)} ious vs {len(dists)} distances")
    return MetricReport(success_auc(ious), precision_auc(dists), ious, dists, len(ious))


def sparsity_bins(ious, dists, point_counts, edges=(10, 50, 150)):
    """Split frames into four intervals by in-box point count and score each.

    edges (a, b, c) produce bins [0, a), [a, b), [b, c), [c, inf).
    """
    ious = np.asarray(ious, dtype=float)
    dists = np.asarray(dists, dtype=float)
    counts = np.asarray(point_counts)
    if not (len(ious) == len(dists) == len(counts)):
        raise ValueError("sparsity_bins: input lengths differ")
    bounds = [0, *edges, np.inf]
    bins = {}
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        name = f"[{lo},{'inf' if np.isinf(hi) else hi})"
        mask = (counts >= lo) & (counts < hi)
        if mask.any():
            bins[name] = report(ious[mask], dists[mask])
        else:
            bins[name] = MetricReport(float("nan"), float("nan"), [], [], 0)
    return bins


def write_report(path, rep, config_hash="", extra=None):
    """JSON metric report plus a per-frame CSV next to it."""
    payload = rep.to_dict()
    payload["config_hash"] = config_hash
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    csv_path = str(path) + ".frames.csv"
    with open(csv_path, "w") as f:
        f.write("frame,iou,center_distance\n")
        for i, (v, d) in enumerate(zip(rep.ious, rep.dists)):
            f.write(f"{i},{v:.6f},{d:.6f}\n")
    return csv_path
