"""Temporal detection metrics: tIoU, AP, mAP over tIoU thresholds, error breakdown."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
ERROR_CATEGORIES = ("true_positive", "localization", "confusion", "background", "double_detection")


def tiou(a, b) -> float:
    """tIoU of two inclusive snippet intervals, taken as [start, end + 1)."""
    a1, a2 = a[0], a[1] + 1
    b1, b2 = b[0], b[1] + 1
    inter = min(a2, b2) - max(a1, b1)
    if inter <= 0:
        return 0.0
    return inter / (max(a2, b2) - min(a1, b1))


def _sort_key(p):
    return (-p.score, p.video_id, p.start)


def match_predictions(predictions, gt_by_video: dict, threshold: float) -> np.ndarray:
    """Greedy matching in score order. Returns a 0/1 array aligned with the sorted predictions.

    ``gt_by_video`` maps video id to a list of (start, end) for one class.
    """
    matched = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gt_by_video.items()}
    tp = np.zeros(len(predictions))
    for i, p in enumerate(predictions):
        segs = gt_by_video.get(p.video_id, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(segs):
            if matched[p.video_id][j]:
                continue
            iou = tiou((p.start, p.end), g)
            if iou >= threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[p.video_id][best_j] = True
            tp[i] = 1.0
    return tp


def average_precision(predictions, gt, threshold: float) -> float:
    """All-point interpolated AP for one class.

    ``predictions`` carry ``video_id, start, end, score``; ``gt`` is an
    iterable of ``(video_id, start, end)``.
    """
    gt_by_video = defaultdict(list)
    for vid, s, e in gt:
        gt_by_video[vid].append((s, e))
    npos = sum(len(v) for v in gt_by_video.values())
    if npos == 0 or not predictions:
        return 0.0
    preds = sorted(predictions, key=_sort_key)
    tp = match_predictions(preds, gt_by_video, threshold)
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(preds) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * envelope))


@dataclass
class EvalReport:
    per_class_ap: dict = field(default_factory=dict)  # (class_id, threshold) -> AP
    map_per_threshold: dict = field(default_factory=dict)
    average_map: float = 0.0
    error_breakdown: dict = field(default_factory=dict)

    def map_at(self, threshold: float) -> float:
        return self.map_per_threshold[round(threshold, 2)]

    def to_json(self) -> dict:
        return {
            "per_class_ap": [
                {"class_id": c, "threshold": t, "ap": ap} for (c, t), ap in sorted(self.per_class_ap.items())
            ],
            "map_per_threshold": [{"threshold": t, "mAP": v} for t, v in sorted(self.map_per_threshold.items())],
            "average_map": self.average_map,
            "error_breakdown": {k: self.error_breakdown.get(k, 0) for k in ERROR_CATEGORIES},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def error_breakdown(predictions, gt, threshold: float = 0.5) -> dict:
    """Classify every prediction (highest score first) into one error category.

    ``gt`` is an iterable of ``(video_id, start, end, class_id)``.
    """
    by_video = defaultdict(list)
    for vid, s, e, c in gt:
        by_video[vid].append(((s, e), c))
    matched = {vid: [False] * len(v) for vid, v in by_video.items()}
    counts = dict.fromkeys(ERROR_CATEGORIES, 0)
    for p in sorted(predictions, key=lambda p: (-p.score, p.video_id, p.start, p.class_id)):
        segs = by_video.get(p.video_id, [])
        ious = [tiou((p.start, p.end), g) for g, _ in segs]
        same = [j for j, (_, c) in enumerate(segs) if c == p.class_id]
        free = [j for j in same if not matched[p.video_id][j] and ious[j] >= threshold]
        if free:
            j = max(free, key=lambda j: (ious[j], -j))
            matched[p.video_id][j] = True
            cat = "true_positive"
        elif any(ious[j] >= threshold for j in same):
            cat = "double_detection"
        elif any(ious[j] > 0 for j in same):
            cat = "localization"
        elif not ious or max(ious) == 0.0:
            cat = "background"
        else:
            # overlaps only other-class ground truth
            cat = "confusion"
        counts[cat] += 1
    return counts


def evaluate(predictions, manifest, thresholds=DEFAULT_THRESHOLDS, video_ids=None) -> EvalReport:
    """mAP per threshold over classes with at least one ground-truth instance."""
    ids = set(manifest.ids() if video_ids is None else video_ids)
    gt = [(v.id, s.start, s.end, s.class_id) for v in manifest.videos if v.id in ids for s in v.gt_segments]
    if not gt:
        raise ValueError("no ground-truth segments to evaluate against")
    preds = [p for p in predictions if p.video_id in ids]
    classes = sorted({c for *_, c in gt})
    preds_by_class = defaultdict(list)
    for p in preds:
        preds_by_class[p.class_id].append(p)
    report = EvalReport()
    for t in thresholds:
        t = round(float(t), 2)
        aps = []
        for c in classes:
            ap = average_precision(preds_by_class[c], [(v, s, e) for v, s, e, k in gt if k == c], t)
            report.per_class_ap[(c, t)] = ap
            aps.append(ap)
        report.map_per_threshold[t] = float(np.mean(aps))
    report.average_map = float(np.mean(list(report.map_per_threshold.values())))
    report.error_breakdown = error_breakdown(preds, gt, 0.5)
    return report
