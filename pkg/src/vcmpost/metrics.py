"""Detection-accuracy math: IoU, matching, AP, mAP, F1, rate curves.

Matching is greedy in confidence order: each detection claims the
still-unmatched ground truth it overlaps best, provided the overlap
reaches the IoU threshold. Average precision integrates the precision
envelope over all recall points. Classes absent from the ground truth
are reported with a sentinel (None) and excluded from the mean, which
is returned on a 0-100 scale.

Everything here is a pure function over plain data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

IOU_THRESHOLD = 0.5


def _as_box(obj) -> tuple:
    box = getattr(obj, "box", obj)
    x0, y0, x1, y1 = (float(v) for v in box)
    return x0, y0, x1, y1


def _class_of(obj):
    return getattr(obj, "class_id", None)


def iou(a, b) -> float:
    """Intersection-over-union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = _as_box(a)
    bx0, by0, bx1, by1 = _as_box(b)
    if ax0 >= ax1 or ay0 >= ay1:
        raise UsageError(f"degenerate box {(ax0, ay0, ax1, ay1)}")
    if bx0 >= bx1 or by0 >= by1:
        raise UsageError(f"degenerate box {(bx0, by0, bx1, by1)}")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class MatchResult:
    """Outcome of matching detections against ground truths, input order."""

    det_is_tp: list = field(default_factory=list)
    det_matched_gt: list = field(default_factory=list)
    gt_matched: list = field(default_factory=list)

    @property
    def tp_count(self) -> int:
        return sum(self.det_is_tp)


def _check_homogeneous(dets, gts) -> None:
    classes = {d.class_id for d in dets}
    classes |= {c for c in (_class_of(g) for g in gts) if c is not None}
    if len(classes) > 1:
        raise UsageError(
            f"matching expects one class at a time, got classes {sorted(classes)}"
        )


def match_detections(dets, gts, iou_thr: float = IOU_THRESHOLD) -> MatchResult:
    """Greedy confidence-ordered matching of one class's boxes."""
    _check_homogeneous(dets, gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    gt_boxes = [_as_box(g) for g in gts]
    result = MatchResult(
        det_is_tp=[False] * len(dets),
        det_matched_gt=[None] * len(dets),
        gt_matched=[False] * len(gts),
    )
    for i in order:
        best_iou = 0.0
        best_gt = None
        for j, gt_box in enumerate(gt_boxes):
            if result.gt_matched[j]:
                continue
            overlap = iou(dets[i].box, gt_box)
            if overlap > best_iou:
                best_iou = overlap
                best_gt = j
        if best_gt is not None and best_iou >= iou_thr:
            result.det_is_tp[i] = True
            result.det_matched_gt[i] = best_gt
            result.gt_matched[best_gt] = True
    return result


def _envelope_area(recalls, precisions) -> float:
    """Area under the precision envelope, integrated over recall."""
    mrec = np.concatenate(([0.0], np.asarray(recalls, dtype=np.float64)))
    mpre = np.concatenate(([0.0], np.asarray(precisions, dtype=np.float64)))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(dets, gts, iou_thr: float = IOU_THRESHOLD):
    """All-point interpolated AP for one class; None when gts is empty."""
    if len(gts) == 0:
        return None
    if len(dets) == 0:
        return 0.0
    result = match_detections(dets, gts, iou_thr)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    flags = np.array([result.det_is_tp[i] for i in order], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    recalls = tp_cum / len(gts)
    precisions = tp_cum / (tp_cum + fp_cum)
    return _envelope_area(recalls, precisions)


def pooled_average_precision(scored, gt_count: int):
    """AP from pre-matched (confidence, is_tp) pairs pooled over frames."""
    if gt_count == 0:
        return None
    if not scored:
        return 0.0
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    flags = np.array([1.0 if scored[i][1] else 0.0 for i in ranked])
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    return _envelope_area(tp_cum / gt_count, tp_cum / (tp_cum + fp_cum))


def mean_ap(per_class_ap) -> float:
    """Mean AP over classes present in the ground truth, on a 0-100 scale."""
    present = [v for v in per_class_ap.values() if v is not None]
    if not present:
        raise UsageError("no class present in the ground truth")
    return 100.0 * float(np.mean(present))


def f1_at_threshold(dets, gts, conf_thr: float = 0.25,
                    iou_thr: float = IOU_THRESHOLD) -> float:
    """F1 of one class after dropping detections below conf_thr."""
    kept = [d for d in dets if d.confidence >= conf_thr]
    _check_homogeneous(kept, gts)
    tp = match_detections(kept, gts, iou_thr).tp_count if kept else 0
    return f1_from_counts(tp, len(kept) - tp, len(gts) - tp)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class RatePoint:
    """One (bitrate, accuracy) sample of a rate-accuracy curve."""

    bitrate_kbps: float
    map_value: float
    per_class_ap: dict
    f1: dict
    label: str

    def __post_init__(self):
        if self.bitrate_kbps < 0:
            raise UsageError(f"bitrate must be >= 0, got {self.bitrate_kbps}")
        if not 0.0 <= self.map_value <= 100.0:
            raise UsageError(f"mAP is reported on 0-100, got {self.map_value}")
        if self.label not in ("encoded", "postprocessed"):
            raise UsageError(f"label must be 'encoded' or 'postprocessed', got {self.label!r}")


def build_rate_curve(points) -> dict:
    """Group points by label and sort each group by bitrate ascending.

    Labels keep first-appearance order; within a label, points with
    equal bitrate keep insertion order (the sort is stable).
    """
    points = list(points)
    if not points:
        raise UsageError("a rate curve needs at least one point")
    grouped: dict = {}
    for p in points:
        grouped.setdefault(p.label, []).append(p)
    return {label: sorted(group, key=lambda p: p.bitrate_kbps)
            for label, group in grouped.items()}


def evaluate_frames(per_frame_dets, per_frame_gts, conf_thr: float = 0.25,
                    iou_thr: float = IOU_THRESHOLD) -> tuple:
    """Score one sequence: (per-class AP, mAP 0-100, per-class F1).

    Detections are matched within their own frame; AP pools the scored
    detections over all frames, F1 micro-aggregates the TP/FP/FN
    counts. Classes never seen in the ground truth get the AP sentinel
    None and an F1 computed from their detections alone (0 unless they
    produced none).
    """
    if len(per_frame_dets) != len(per_frame_gts):
        raise UsageError(
            f"detection and ground-truth frame lists differ in length: "
            f"{len(per_frame_dets)} vs {len(per_frame_gts)}"
        )
    classes = set()
    for dets in per_frame_dets:
        classes.update(d.class_id for d in dets)
    for gts in per_frame_gts:
        classes.update(_class_of(g) for g in gts)
    classes.discard(None)
    per_class_ap = {}
    per_class_f1 = {}
    for c in sorted(classes):
        scored = []
        gt_total = 0
        tp = fp = fn = 0
        for dets, gts in zip(per_frame_dets, per_frame_gts):
            c_dets = [d for d in dets if d.class_id == c]
            c_gts = [g for g in gts if _class_of(g) == c]
            gt_total += len(c_gts)
            match = match_detections(c_dets, c_gts, iou_thr)
            for d, is_tp in zip(c_dets, match.det_is_tp):
                scored.append((d.confidence, is_tp))
            kept = [d for d in c_dets if d.confidence >= conf_thr]
            kept_tp = match_detections(kept, c_gts, iou_thr).tp_count if kept else 0
            tp += kept_tp
            fp += len(kept) - kept_tp
            fn += len(c_gts) - kept_tp
        per_class_ap[c] = pooled_average_precision(scored, gt_total)
        per_class_f1[c] = f1_from_counts(tp, fp, fn)
    map_value = mean_ap(per_class_ap)
    return per_class_ap, map_value, per_class_f1
