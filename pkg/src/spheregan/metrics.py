"""Saliency metrics: CC and KL against maps, NSS and AUC-Judd against fixations."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import DegenerateInputError, kl_divergence, pearson

COLUMNS = ("cc", "nss", "kl", "auc_judd")
HEADERS = {"cc": "CC ↑", "nss": "NSS ↑", "kl": "KL ↓", "auc_judd": "AUC_JUDD ↑"}


def _flat(a):
    return np.asarray(a, dtype=np.float64).reshape(-1)


def _map2d(a):
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a single H x W map, got shape {a.shape}")
    return a


def _fix_indices(fixations, shape):
    pts = np.asarray(fixations, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise DegenerateInputError("no fixations")
    h, w = shape
    if (pts[:, 0] < 0).any() or (pts[:, 0] >= h).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= w).any():
        raise ValueError(f"fixation outside the {h}x{w} map")
    return pts[:, 0] * w + pts[:, 1]


def metric_cc(pred, gt):
    """Pearson correlation between two maps."""
    cc, *_ = pearson(_flat(pred)[None], _flat(gt)[None])
    return float(cc[0])


def metric_kl(pred, gt, eps=1e-7):
    """KL(gt || pred), same normalization as the KL training loss."""
    kl, *_ = kl_divergence(_flat(gt)[None], _flat(pred)[None], eps)
    return float(kl[0])


def metric_nss(pred, fixations):
    """Mean z-scored prediction (population std) at the fixated pixels."""
    pred = _map2d(pred)
    idx = _fix_indices(fixations, pred.shape)
    v = pred.reshape(-1)
    std = v.std()
    if std == 0:
        raise DegenerateInputError("NSS undefined for a constant map")
    return float(((v[idx] - v.mean()) / std).mean())


def metric_auc_judd(pred, fixations):
    """ROC area with the fixated values as thresholds, swept from high to low.

    TPR is measured over fixations, FPR over the remaining pixels; values tied
    with a threshold count as above it.
    """
    pred = _map2d(pred)
    idx = _fix_indices(fixations, pred.shape)
    v = pred.reshape(-1)
    n_pix, n_fix = v.size, idx.size
    if n_pix - n_fix <= 0:
        raise DegenerateInputError("every pixel is fixated; FPR undefined")
    at_fix = v[idx]
    thresholds = np.unique(at_fix)[::-1]
    sorted_fix = np.sort(at_fix)
    sorted_all = np.sort(v)
    above_fix = n_fix - np.searchsorted(sorted_fix, thresholds, side="left")
    above_all = n_pix - np.searchsorted(sorted_all, thresholds, side="left")
    tpr = above_fix / n_fix
    fpr = np.clip((above_all - above_fix) / (n_pix - n_fix), 0.0, 1.0)
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    frame_count: int = 0
    meta: dict = field(default_factory=lambda: {"aggregation": "per-frame mean"})

    def to_dict(self):
        return {
            "columns": list(COLUMNS),
            "mean": self.mean,
            "counts": self.counts,
            "excluded": self.excluded,
            "frame_count": self.frame_count,
            "meta": self.meta,
            "frames": self.frames,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=False)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def table(self, label="Sphere-GAN"):
        return format_table([(label, self.mean)])


def format_table(rows, first="Method"):
    """Aligned text table with columns CC, NSS, KL, AUC_JUDD."""
    def cell(v):
        return "—" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"

    body = [[str(name)] + [cell(m.get(c)) for c in COLUMNS] for name, m in rows]
    head = [first] + [HEADERS[c] for c in COLUMNS]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = [" | ".join(s.ljust(widths[i]) if i == 0 else s.rjust(widths[i]) for i, s in enumerate(r)) for r in [head] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def frame_metrics(pred, gt, fixations):
    """All four metrics for one frame; a degenerate metric is reported as None."""
    out = {}
    fns = {
        "cc": lambda: metric_cc(pred, gt),
        "nss": lambda: metric_nss(pred, fixations),
        "kl": lambda: metric_kl(pred, gt),
        "auc_judd": lambda: metric_auc_judd(pred, fixations),
    }
    for name in COLUMNS:
        try:
            out[name] = fns[name]()
        except DegenerateInputError:
            out[name] = None
    return out


def evaluate_frames(preds, gts, fixations, ids=None):
    """Per-frame metrics and their means; degenerate frames are left out of a metric's mean."""
    preds, gts, fixations = list(preds), list(gts), list(fixations)
    if not (len(preds) == len(gts) == len(fixations)):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(gts)} maps, {len(fixations)} fixation sets")
    report = MetricsReport(frame_count=len(preds))
    for i, (p, g, f) in enumerate(zip(preds, gts, fixations)):
        row = {"id": ids[i] if ids is not None else i}
        row.update(frame_metrics(p, g, f))
        report.frames.append(row)
    for name in COLUMNS:
        vals = [r[name] for r in report.frames if r[name] is not None]
        report.counts[name] = len(vals)
        report.excluded[name] = len(report.frames) - len(vals)
        report.mean[name] = float(np.mean(vals)) if vals else None
    return report
