"""Segmentation metrics on integer label masks.

Conventions: a class absent from both prediction and ground truth scores 1.0
on every ratio metric and 0.0 on HD95.  When exactly one side is empty the
HD95 entry is the image diagonal and is flagged invalid, so it is left out of
the HD95 means (the count of such entries is reported alongside).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


def _binary(mask, k):
    return np.asarray(mask) == k


def dsc(pred, gt, k: int) -> float:
    p, g = _binary(pred, k), _binary(gt, k)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it or off the image."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    interior = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask.astype(bool) & ~interior


def percentile95(d: np.ndarray) -> float:
    """Sorted value at index ceil(0.95 n) - 1."""
    n = len(d)
    return float(np.sort(d)[(95 * n + 99) // 100 - 1])


def hd95(pred, gt, k: int, spacing: float = 1.0) -> tuple[float, bool]:
    """95th-percentile symmetric Hausdorff distance between class-k boundaries.

    Returns ``(distance, valid)``; ``valid`` is False when exactly one mask
    is empty and the distance is the diagonal sentinel.
    """
    p, g = _binary(pred, k), _binary(gt, k)
    if not p.any() and not g.any():
        return 0.0, True
    if not p.any() or not g.any():
        h, w = p.shape
        return float(np.hypot(h, w)) * spacing, False
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    d = cdist(bp, bg)
    return max(percentile95(d.min(axis=1)), percentile95(d.min(axis=0))) * spacing, True


def confusion_counts(pred, gt, num_classes: int) -> np.ndarray:
    """(K, 4) array of TP, FP, FN, TN per class."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return np.stack([tp, fp, fn, tn], axis=1)


def _ratio(num, den):
    return np.where(den == 0, 1.0, num / np.maximum(den, 1))


def confusion_metrics(pred, gt, num_classes: int) -> dict:
    """Per-class IoU, accuracy, specificity and sensitivity, plus foreground means."""
    tp, fp, fn, tn = confusion_counts(pred, gt, num_classes).T.astype(np.int64)
    out = {
        "iou": _ratio(tp, tp + fp + fn),
        "acc": _ratio(tp + tn, tp + fp + fn + tn),
        "spe": _ratio(tn, tn + fp),
        "sen": _ratio(tp, tp + fn),
    }
    for key in list(out):
        out["m" + key] = float(out[key][1:].mean())
    return out


@dataclass
class MetricsRecord:
    dsc: list
    hd95: list
    hd95_valid: list
    iou: list
    acc: list
    spe: list
    sen: list
    sample: str = ""

    @property
    def num_classes(self):
        return len(self.dsc)

    def fg_mean(self, key: str) -> float:
        vals = getattr(self, key)[1:]
        if key == "hd95":
            vals = [v for v, ok in zip(vals, self.hd95_valid[1:]) if ok]
            return float(np.mean(vals)) if vals else float("nan")
        return float(np.mean(vals))


def evaluate_pair(pred, gt, num_classes: int, spacing: float = 1.0, sample: str = "") -> MetricsRecord:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    conf = confusion_metrics(pred, gt, num_classes)
    hds = [hd95(pred, gt, k, spacing) for k in range(num_classes)]
    return MetricsRecord(
        dsc=[dsc(pred, gt, k) for k in range(num_classes)],
        hd95=[h for h, _ in hds],
        hd95_valid=[ok for _, ok in hds],
        iou=[float(v) for v in conf["iou"]],
        acc=[float(v) for v in conf["acc"]],
        spe=[float(v) for v in conf["spe"]],
        sen=[float(v) for v in conf["sen"]],
        sample=sample,
    )


@dataclass
class Summary:
    per_class: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    hd95_excluded: int = 0
    count: int = 0


def summarize(records: list) -> Summary:
    """Per-class averages over samples and foreground means of those averages."""
    if not records:
        return Summary()
    k = records[0].num_classes
    s = Summary(count=len(records))
    for key in ("dsc", "iou", "acc", "spe", "sen"):
        s.per_class[key] = [float(np.mean([getattr(r, key)[c] for r in records])) for c in range(k)]
        s.means["m" + key] = float(np.mean(s.per_class[key][1:]))
    hd = []
    for c in range(k):
        vals = [r.hd95[c] for r in records if r.hd95_valid[c]]
        hd.append(float(np.mean(vals)) if vals else float("nan"))
    s.per_class["hd95"] = hd
    fg = [v for v in hd[1:] if not np.isnan(v)]
    s.means["mhd95"] = float(np.mean(fg)) if fg else float("nan")
    s.hd95_excluded = sum(not ok for r in records for ok in r.hd95_valid[1:])
    return s


CSV_COLUMNS = ["sample", "class", "dsc", "hd95", "hd95_valid", "iou", "acc", "spe", "sen",
               "hd95_excluded"]


def write_metrics_csv(path, records: list) -> Summary:
    """One row per (sample, class), then per-class ``mean`` rows and a ``fg_mean`` row."""
    summary = summarize(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            for c in range(r.num_classes):
                w.writerow([r.sample, c, repr(r.dsc[c]), repr(r.hd95[c]), int(r.hd95_valid[c]),
                            repr(r.iou[c]), repr(r.acc[c]), repr(r.spe[c]), repr(r.sen[c]), ""])
        if records:
            for c in range(records[0].num_classes):
                pc = summary.per_class
                w.writerow(["mean", c, repr(pc["dsc"][c]), repr(pc["hd95"][c]), "",
                            repr(pc["iou"][c]), repr(pc["acc"][c]), repr(pc["spe"][c]),
                            repr(pc["sen"][c]), ""])
        m = summary.means
        w.writerow(["mean", "fg_mean", repr(m.get("mdsc", float("nan"))),
                    repr(m.get("mhd95", float("nan"))), "", repr(m.get("miou", float("nan"))),
                    repr(m.get("macc", float("nan"))), repr(m.get("mspe", float("nan"))),
                    repr(m.get("msen", float("nan"))), summary.hd95_excluded])
    return summary
