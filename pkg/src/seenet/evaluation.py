"""Metrics: pixel-wise segmentation scores, RECIST diameter differences,
and FROC detection sensitivity."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .geometry import RecistMeasurement

log = logging.getLogger(__name__)

DEFAULT_FP_POINTS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
FROC_IOU = 0.5

# Reference results of the full-scale two-stage system (tens of thousands of
# annotated CT slices, pretrained backbones, full schedules). Desk-scale runs
# are NOT expected to reproduce these; they are kept for context next to
# phantom-benchmark numbers.
REFERENCE_FULL_SCALE = {
    "segmentation": {"precision": (0.883, 0.057), "recall": (0.947, 0.074),
                     "dice": (0.912, 0.039)},
    "recist_diff_mm": {"long": (1.747, 1.983), "short": (1.555, 1.808)},
    "stage1_only": {"dice": (0.827, 0.092), "long_mm": (2.361, 2.878)},
    "detection_sensitivity_pct": {
        "with_click": {0.5: 97.24, 1: 98.37, 2: 99.31, 4: 99.47},
        "no_click": {0.5: 75.92, 1: 83.74, 2: 88.13, 4: 92.11, 8: 94.82, 16: 95.63},
    },
}


def seg_scores(pred_mask: np.ndarray, true_mask: np.ndarray) -> dict[str, float]:
    """Pixel-wise precision, recall, and Dice. Empty-vs-empty scores 1.0."""
    p = np.asarray(pred_mask) > 0
    t = np.asarray(true_mask) > 0
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} vs {t.shape}")
    inter = int((p & t).sum())
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        log.info("seg_scores: both masks empty, scoring 1.0 by convention")
        return {"precision": 1.0, "recall": 1.0, "dice": 1.0}
    precision = inter / np_ if np_ else 0.0
    recall = inter / nt if nt else 0.0
    dice = 2.0 * inter / (np_ + nt)
    return {"precision": precision, "recall": recall, "dice": dice}


def recist_diff(pred: RecistMeasurement, truth: RecistMeasurement) -> dict[str, float]:
    """Absolute per-axis diameter-length differences in mm."""
    return {
        "d_long_mm": abs(pred.long_mm - truth.long_mm),
        "d_short_mm": abs(pred.short_mm - truth.short_mm),
    }


def recist_diff_stats(pairs) -> dict[str, float]:
    """Mean and std of the per-axis differences over (pred, truth) pairs."""
    diffs = [recist_diff(p, t) for p, t in pairs]
    longs = np.array([d["d_long_mm"] for d in diffs])
    shorts = np.array([d["d_short_mm"] for d in diffs])
    return {
        "long_mean_mm": float(longs.mean()),
        "long_std_mm": float(longs.std()),
        "short_mean_mm": float(shorts.mean()),
        "short_std_mm": float(shorts.std()),
        "n": len(diffs),
    }


# ---------------------------------------------------------------------------
# FROC


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _greedy_match_image(preds, truths, iou_thresh: float):
    """Label each scored prediction TP/FP by greedy best-IoU matching.

    Predictions are processed in descending score order; each may claim at
    most one unmatched truth with IoU strictly above the threshold.
    Returns (scores, is_tp) arrays in that processing order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    taken = [False] * len(truths)
    scores, is_tp = [], []
    for i in order:
        score, box = preds[i][0], preds[i][1]
        best_j, best_iou = -1, iou_thresh
        for j, tbox in enumerate(truths):
            if taken[j]:
                continue
            iou = box_iou(box, tbox)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
            is_tp.append(True)
        else:
            is_tp.append(False)
        scores.append(score)
    return np.array(scores, dtype=float), np.array(is_tp, dtype=bool)


@dataclass
class FrocCurve:
    """Achieved operating points: average FPs per image vs sensitivity."""

    fp_per_image: np.ndarray
    sensitivity: np.ndarray

    def at(self, fp_points) -> list[float]:
        """Linear interpolation between achieved points; clamps at the ends.

        The trivial operating point (0 FP, sensitivity of TPs scored above
        every FP) anchors the left end.
        """
        fp, sens = self.fp_per_image, self.sensitivity
        # collapse duplicate fp values to their best sensitivity
        uniq: dict[float, float] = {}
        for f, s in zip(fp, sens):
            uniq[f] = max(uniq.get(f, 0.0), s)
        if 0.0 not in uniq:
            uniq[0.0] = 0.0
        xs = np.array(sorted(uniq))
        ys = np.array([uniq[x] for x in xs])
        return [float(np.interp(t, xs, ys)) for t in fp_points]


def froc_curve(predictions, truths, iou_thresh: float = FROC_IOU) -> FrocCurve:
    """Build the FROC curve from per-image scored boxes and truth boxes.

    ``predictions``: list (per image) of (score, box) pairs; ``truths``: list
    (per image) of boxes. Matching is greedy per image in descending score;
    a detection counts at IoU strictly greater than ``iou_thresh``.
    """
    if len(predictions) != len(truths):
        raise ShapeMismatch("prediction and truth lists differ in length")
    n_images = len(truths)
    n_truths = sum(len(t) for t in truths)
    all_scores, all_tp = [], []
    for preds, tboxes in zip(predictions, truths):
        s, tp = _greedy_match_image(preds, tboxes, iou_thresh)
        all_scores.append(s)
        all_tp.append(tp)
    scores = np.concatenate(all_scores) if all_scores else np.empty(0)
    tps = np.concatenate(all_tp) if all_tp else np.empty(0, bool)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    tps = tps[order]
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(~tps)
    # one operating point per distinct score threshold (last of each tie group)
    if len(scores):
        last = np.r_[scores[1:] != scores[:-1], True]
        cum_tp, cum_fp = cum_tp[last], cum_fp[last]
    sens = cum_tp / n_truths if n_truths else np.zeros_like(cum_tp, dtype=float)
    fp_rate = cum_fp / n_images if n_images else np.zeros_like(cum_fp, dtype=float)
    return FrocCurve(fp_per_image=fp_rate.astype(float), sensitivity=sens.astype(float))


def froc(
    predictions,
    truths,
    fp_points=DEFAULT_FP_POINTS,
    iou_thresh: float = FROC_IOU,
) -> dict[float, float]:
    """Sensitivity at the requested average-FP-per-image operating points."""
    curve = froc_curve(predictions, truths, iou_thresh)
    return dict(zip([float(f) for f in fp_points], curve.at(fp_points)))


# ---------------------------------------------------------------------------
# Report writing


def write_metrics_csv(path, rows: list[dict]):
    """Write a list of flat dicts as CSV (union of keys, stable order)."""
    path = Path(path)
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def write_json_report(path, per_image: list[dict], aggregate: dict):
    path = Path(path)
    path.write_text(json.dumps({"aggregate": aggregate, "per_image": per_image}, indent=2))
