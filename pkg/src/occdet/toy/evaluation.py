"""Box matching and per-tier 11-point interpolated average precision."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenes import TIERS


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.as_xyxy()
    bx0, by0, bx1, by1 = b.as_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def nms(detections, threshold: float = 0.5, limit: int | None = None):
    """Greedy non-maximum suppression over (score, Roi) pairs."""
    kept = []
    for det in sorted(detections, key=lambda d: -d[0]):
        if limit is not None and len(kept) >= limit:
            break
        if all(iou(det[1], k[1]) < threshold for k in kept):
            kept.append(det)
    return kept


def match(detections, boxes, threshold: float = 0.5):
    """Greedy score-ordered matching; returns the matched GT index (or -1) per detection."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i][0])
    taken = set()
    result = [-1] * len(detections)
    for i in order:
        best, best_iou = -1, threshold
        for j, gt in enumerate(boxes):
            if j in taken:
                continue
            v = iou(detections[i][1], gt)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken.add(best)
            result[i] = best
    return result


def ap_11_point(tp_flags, num_positives: int) -> float:
    """11-point interpolated AP from score-sorted TP/FP flags."""
    if num_positives == 0:
        return float("nan")
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    recall = tp / num_positives if len(tp_flags) else np.zeros(0)
    precision = tp / np.maximum(tp + fp, 1e-12) if len(tp_flags) else np.zeros(0)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        above = precision[recall >= r - 1e-12]
        ap += above.max() if above.size else 0.0
    return ap / 11.0


@dataclass
class Metrics:
    ap_easy: float = float("nan")
    ap_moderate: float = float("nan")
    ap_hard: float = float("nan")
    loss_curve: list = field(default_factory=list)
    epochs_to_converge: int | None = None
    rng_state: dict | None = None  # training RNG after the last step, for checkpoints

    def ap(self, tier: str) -> float:
        return getattr(self, f"ap_{tier}")

    def as_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v
        return {
            "ap_easy": clean(self.ap_easy),
            "ap_moderate": clean(self.ap_moderate),
            "ap_hard": clean(self.ap_hard),
            "loss_curve": list(self.loss_curve),
            "epochs_to_converge": self.epochs_to_converge,
        }


def evaluate_detections(scenes, detections_per_scene, iou_threshold: float = 0.5) -> Metrics:
    """Per-tier AP at the given IoU.

    Detections matched to a ground truth of another tier are ignored for that
    tier; unmatched detections are false positives in every tier. Scenes with
    no objects are skipped entirely.
    """
    records = {t: [] for t in TIERS}
    positives = {t: 0 for t in TIERS}
    for scene, dets in zip(scenes, detections_per_scene):
        if scene.num_objects == 0:
            continue
        for t in scene.tiers:
            positives[t] += 1
        assigned = match(dets, scene.boxes, iou_threshold)
        for (score, _), j in zip(dets, assigned):
            for t in TIERS:
                if j < 0:
                    records[t].append((score, 0.0))
                elif scene.tiers[j] == t:
                    records[t].append((score, 1.0))
    aps = {}
    for t in TIERS:
        recs = sorted(records[t], key=lambda r: -r[0])
        aps[t] = ap_11_point([r[1] for r in recs], positives[t])
    return Metrics(aps["easy"], aps["moderate"], aps["hard"])
